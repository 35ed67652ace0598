//! Named verification suites and failure serialization for replay.

use anyhow::{bail, Result};
use rayon::prelude::*;
use recap_core::oracle::RandomInstance;
use recap_core::suites::{self, SuiteReport, MC_SAMPLES};
use recap_core::Seed;
use serde::Serialize;

/// Bound, degeneration and invariance suites run by `verify`.
pub const VERIFY_SUITES: &[&str] = &["lemma1", "lemma2", "prop1", "degeneration", "prop2", "monotonicity", "invariance"];
/// Finite-difference suites run by `gradcheck`.
pub const GRAD_SUITES: &[&str] = &["gradz", "affine_grad"];

/// Default instance counts.
pub fn default_count(name: &str) -> usize {
    match name {
        "lemma1" | "degeneration" | "invariance" => 1000,
        "affine_grad" => 50,
        "gradz" => 100,
        _ => 200,
    }
}

/// Runs one suite; `count` overrides the default instance count. Each suite
/// draws from its own sub-stream of `seed`, so filtering does not change
/// results.
pub fn run_suite(name: &str, seed: Seed, count: Option<usize>) -> Result<SuiteReport> {
    let n = count.unwrap_or_else(|| default_count(name));
    let s = seed.derive(suite_tag(name)?);
    Ok(match name {
        "lemma1" => suites::lemma1_suite(s, n)?,
        "lemma2" => suites::lemma2_suite(s, n, MC_SAMPLES)?,
        "prop1" => suites::prop1_dominance_suite(s, n, MC_SAMPLES, &suites::regional_entropy_of)?,
        "prop2" => suites::prop2_dominance_suite(s, n, MC_SAMPLES, &suites::regional_instability_of)?,
        "degeneration" => suites::degeneration_suite(s, n)?,
        "monotonicity" => suites::monotonicity_suite(s, n)?,
        "invariance" => suites::invariance_suite(s, n)?,
        "gradz" => suites::gradz_suite(s, n, &suites::grad_z_of)?,
        "affine_grad" => suites::affine_grad_suite(s, n)?,
        _ => unreachable!("suite_tag rejects unknown names"),
    })
}

fn suite_tag(name: &str) -> Result<u64> {
    match VERIFY_SUITES.iter().chain(GRAD_SUITES).position(|&s| s == name) {
        Some(i) => Ok(i as u64 + 1),
        None => bail!(
            "unknown suite `{name}`; expected one of: {}",
            VERIFY_SUITES.iter().chain(GRAD_SUITES).copied().collect::<Vec<_>>().join(", ")
        ),
    }
}

/// Runs suites in parallel; output order follows `names`.
pub fn run_suites(names: &[&str], seed: Seed, count: Option<usize>) -> Result<Vec<SuiteReport>> {
    for n in names {
        suite_tag(n)?;
    }
    names.par_iter().map(|n| run_suite(n, seed, count)).collect()
}

/// Self-contained description of a failing instance.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceRecord {
    pub classes: usize,
    pub dim: usize,
    /// Classifier rows `a_i`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub sigma_diag: Vec<f64>,
    pub tau: f64,
    pub z: Vec<f64>,
}

impl From<&RandomInstance> for InstanceRecord {
    fn from(inst: &RandomInstance) -> Self {
        InstanceRecord {
            classes: inst.head.classes(),
            dim: inst.head.dim(),
            weights: inst.head.weights().iter_rows().map(<[f64]>::to_vec).collect(),
            bias: inst.head.bias().to_vec(),
            sigma_diag: inst.region.sigma_diag().to_vec(),
            tau: inst.region.tau(),
            z: inst.z.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRecord {
    pub suite: String,
    pub index: usize,
    pub detail: String,
    pub instance: Option<InstanceRecord>,
}

pub fn failure_records(report: &SuiteReport) -> Vec<FailureRecord> {
    report
        .failures
        .iter()
        .map(|f| FailureRecord {
            suite: report.name.into(),
            index: f.index,
            detail: f.detail.clone(),
            instance: f.instance.as_ref().map(InstanceRecord::from),
        })
        .collect()
}

/// `lemma1: 1000/1000 passed (worst 1.2e-3)`
pub fn report_line(r: &SuiteReport) -> String {
    format!(
        "{}: {}/{} {} (worst {:.3e})",
        r.name,
        r.passed,
        r.total,
        if r.ok() { "passed" } else { "FAILED" },
        r.worst
    )
}
