//! Timing of the closed-form proxy against sampling, and per-method pass
//! counters.

use std::hint::black_box;
use std::time::Instant;

use anyhow::{ensure, Result};
use recap_core::adapt::{run_stream, MethodConfig, MethodKind, RunOptions};
use recap_core::oracle::mc_batch_terms;
use recap_core::region::RegionProxy;
use recap_core::model::TinyBackbone;
use recap_core::stream::{build_stream, Batch, StreamScenario};
use recap_core::{AffineHead, Matrix, RegionSpec, Seed};
use serde::Serialize;

use crate::pipeline::Prepared;
use crate::StdClock;

#[derive(Debug, Clone, Serialize)]
pub struct ProxyTiming {
    pub batch: usize,
    pub classes: usize,
    pub dim: usize,
    pub n_mc: usize,
    pub repeats: usize,
    pub closed_median_ns: u64,
    pub mc_median_ns: u64,
    pub speedup: f64,
}

fn median_ns<F: FnMut()>(repeats: usize, mut f: F) -> u64 {
    let mut t: Vec<u64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as u64
        })
        .collect();
    t.sort_unstable();
    t[t.len() / 2]
}

/// Median wall time of `L_RE + L_RI` over the batch in closed form versus
/// `n_mc` head forwards per feature.
pub fn bench_proxy_vs_mc(head: &AffineHead, region: &RegionSpec, batch: &Matrix, n_mc: usize, repeats: usize, seed: Seed) -> Result<ProxyTiming> {
    ensure!(repeats >= 10, "need at least 10 repeats, got {repeats}");
    let closed = median_ns(repeats, || {
        let proxy = RegionProxy::new(head, region).expect("validated shapes");
        let mut acc = 0.0;
        for z in batch.iter_rows() {
            let t = proxy.terms(black_box(z)).expect("validated shapes");
            acc += t.l_re + t.l_ri;
        }
        black_box(acc);
    });
    let mut rng = seed.rng();
    // fail early on bad shapes instead of inside the timed loop
    mc_batch_terms(&mut rng, batch, head, region, 1)?;
    let mc = median_ns(repeats, || {
        let (e, k) = mc_batch_terms(&mut rng, black_box(batch), head, region, n_mc).expect("validated shapes");
        black_box(e + k);
    });
    Ok(ProxyTiming {
        batch: batch.rows(),
        classes: head.classes(),
        dim: head.dim(),
        n_mc,
        repeats,
        closed_median_ns: closed,
        mc_median_ns: mc,
        speedup: mc as f64 / closed.max(1) as f64,
    })
}

/// Features of the first `n` stream inputs, across batch boundaries.
pub fn feature_batch(backbone: &TinyBackbone, stream: &[Batch], n: usize) -> Result<Matrix> {
    let rows = stream
        .iter()
        .flat_map(|b| b.inputs().iter_rows())
        .take(n)
        .map(|x| Ok(backbone.features(x)?.z))
        .collect::<Result<Vec<_>>>()?;
    ensure!(rows.len() == n, "stream holds {} samples, need {n}", rows.len());
    Ok(Matrix::from_rows(&rows)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterRow {
    pub method: String,
    pub batches: usize,
    pub forwards: u64,
    pub backwards: u64,
    pub median_step_ns: u64,
}

/// Runs each method over the scenario's stream and reports total passes
/// and the median adaptation-step time.
pub fn method_counters(prep: &Prepared, scenario: &StreamScenario, kinds: &[MethodKind]) -> Result<Vec<CounterRow>> {
    let stream = build_stream(&prep.task, scenario)?;
    kinds
        .iter()
        .map(|&kind| {
            let method = MethodConfig::new(kind, prep.head.classes());
            let mut backbone = prep.backbone.clone();
            let log = run_stream(&mut backbone, &prep.head, &stream, &method, Some(&prep.region), &RunOptions::default(), &mut StdClock::new())?;
            let mut ns: Vec<u64> = log.batches.iter().map(|b| b.step_ns).collect();
            ns.sort_unstable();
            Ok(CounterRow {
                method: kind.name().into(),
                batches: log.batches.len(),
                forwards: log.batches.iter().map(|b| u64::from(b.forwards)).sum(),
                backwards: log.batches.iter().map(|b| u64::from(b.backwards)).sum(),
                median_step_ns: ns.get(ns.len() / 2).copied().unwrap_or(0),
            })
        })
        .collect()
}
