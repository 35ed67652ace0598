//! Online predict-then-adapt engine.
//!
//! Each batch is scored with the current parameters first; only then is the
//! method's loss computed and, when at least one sample is selected, one
//! momentum step applied to the normalization affine (`γ`, `β`). The run
//! never resets.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::math;
use crate::model::{accumulate_norm_affine, AdaptState, Forward, TinyBackbone};
use crate::numerics::{self, argmax, Matrix, Seed, SeededRng};
use crate::region::{self, AffineHead, RecapHyper, RegionProxy, RegionSpec};
use crate::stream::Batch;

/// Parameter-norm ceiling beyond which a run is declared collapsed.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    /// Frozen source model.
    None,
    /// Mean prediction entropy over every sample.
    Entropy,
    /// Entropy filtered by `H < τ_RE` and weighted by `exp(L0 − H)`.
    EntropySelect,
    /// Regional Entropy selection/weighting over `L_RE + λ L_RI`.
    Recap,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [MethodKind::None, MethodKind::Entropy, MethodKind::EntropySelect, MethodKind::Recap];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::None => "none",
            MethodKind::Entropy => "entropy",
            MethodKind::EntropySelect => "entropy_select",
            MethodKind::Recap => "recap",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub hyper: RecapHyper,
    pub lr: f64,
    pub momentum: f64,
}

impl MethodConfig {
    /// Small-network defaults: lr 0.001, momentum 0.9, thresholds from
    /// [`RecapHyper::for_classes`].
    pub fn new(kind: MethodKind, classes: usize) -> Self {
        MethodConfig {
            kind,
            hyper: RecapHyper::for_classes(classes),
            lr: AdaptState::DEFAULT_LR,
            momentum: AdaptState::DEFAULT_MOMENTUM,
        }
    }
}

/// Source of wall-clock nanoseconds. The core crate has none of its own.
pub trait Clock {
    fn now_ns(&mut self) -> u64;
}

/// Always reports zero.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ns(&mut self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub region: RegionSpec,
    pub neighbors: usize,
    pub seed: Seed,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    /// Consistency probe around every test feature, measured before the
    /// update on its batch.
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Share of neighbors whose argmax differs from the center's.
    pub inconsistent_fraction: f64,
    /// Mean `KL(p(z) ‖ p(z̃))` over neighbors.
    pub mean_kl: f64,
}

/// Samples `n` neighbors from `N(z, τΣ)` and compares head predictions with
/// the center. Read-only; argmax ties resolve to the lowest class index.
pub fn consistency_probe(head: &AffineHead, z: &[f64], region: &RegionSpec, n: usize, rng: &mut SeededRng) -> Result<ProbeResult> {
    if n < 1 {
        return Err(Error::invalid("probe needs at least one neighbor"));
    }
    head.check_feature(z)?;
    Error::check_dim("region", head.dim(), region.dim())?;
    let c = head.classes();
    let std = region.effective_std();
    let mut logits = vec![0.0; c];
    head.logits_into(z, &mut logits);
    let center_class = argmax(&logits);
    let mut center = vec![0.0; c];
    numerics::log_softmax_into(&logits, &mut center);

    let mut zt = vec![0.0; z.len()];
    let mut logq = vec![0.0; c];
    let mut flips = 0usize;
    let mut kl_sum = 0.0;
    for _ in 0..n {
        numerics::draw_diag_gaussian(rng, z, &std, &mut zt);
        head.logits_into(&zt, &mut logits);
        if argmax(&logits) != center_class {
            flips += 1;
        }
        numerics::log_softmax_into(&logits, &mut logq);
        let kl: f64 = center
            .iter()
            .zip(&logq)
            .map(|(&lp, &lq)| {
                let p = math::exp(lp);
                if p > 0.0 {
                    p * (lp - lq)
                } else {
                    0.0
                }
            })
            .sum();
        kl_sum += kl.max(0.0);
    }
    Ok(ProbeResult {
        inconsistent_fraction: flips as f64 / n as f64,
        mean_kl: kl_sum / n as f64,
    })
}

/// One row per test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub batch: usize,
    pub domain: usize,
    pub y_true: usize,
    pub y_pred: usize,
    pub entropy: f64,
    /// NaN when no region was available.
    pub l_re: f64,
    pub l_ri: f64,
    pub selected: bool,
    pub weight: f64,
    /// NaN when probing is off.
    pub probe_kl: f64,
    pub probe_inconsistent: f64,
}

/// Per-batch counters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub batch: usize,
    pub size: usize,
    pub forwards: u32,
    pub backwards: u32,
    pub selected: usize,
    pub loss: f64,
    /// Wall time of forward + loss + backward + update.
    pub step_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseEvent {
    pub batch: usize,
    pub step: usize,
    pub reason: String,
    pub loss: f64,
    pub max_param_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub method: MethodKind,
    pub steps: Vec<StepRecord>,
    pub batches: Vec<BatchStats>,
    pub collapse: Option<CollapseEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainAccuracy {
    pub domain: usize,
    pub samples: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub samples: usize,
    pub accuracy: f64,
    pub per_domain: Vec<DomainAccuracy>,
    pub forwards: u64,
    pub backwards: u64,
    pub updates: usize,
    pub mean_selected_fraction: f64,
    pub mean_probe_kl: f64,
    pub mean_probe_inconsistent: f64,
    pub collapsed: bool,
}

impl MetricsLog {
    /// Online accuracy over the predictions made before each update.
    pub fn accuracy(&self) -> f64 {
        if self.steps.is_empty() {
            return f64::NAN;
        }
        self.steps.iter().filter(|s| s.y_pred == s.y_true).count() as f64 / self.steps.len() as f64
    }

    /// Mean probe KL over the last `window` samples.
    pub fn tail_probe_kl(&self, window: usize) -> f64 {
        let start = self.steps.len().saturating_sub(window);
        mean(self.steps[start..].iter().map(|s| s.probe_kl))
    }

    pub fn summary(&self) -> RunSummary {
        let mut per_domain: Vec<DomainAccuracy> = Vec::new();
        let max_domain = self.steps.iter().map(|s| s.domain).max();
        if let Some(m) = max_domain {
            for d in 0..=m {
                let (n, hit) = self
                    .steps
                    .iter()
                    .filter(|s| s.domain == d)
                    .fold((0usize, 0usize), |(n, h), s| (n + 1, h + (s.y_pred == s.y_true) as usize));
                if n > 0 {
                    per_domain.push(DomainAccuracy {
                        domain: d,
                        samples: n,
                        accuracy: hit as f64 / n as f64,
                    });
                }
            }
        }
        let selected = self.steps.iter().filter(|s| s.selected).count();
        RunSummary {
            samples: self.steps.len(),
            accuracy: self.accuracy(),
            per_domain,
            forwards: self.batches.iter().map(|b| b.forwards as u64).sum(),
            backwards: self.batches.iter().map(|b| b.backwards as u64).sum(),
            updates: self.batches.iter().filter(|b| b.backwards > 0).count(),
            mean_selected_fraction: if self.steps.is_empty() { 0.0 } else { selected as f64 / self.steps.len() as f64 },
            mean_probe_kl: mean(self.steps.iter().map(|s| s.probe_kl)),
            mean_probe_inconsistent: mean(self.steps.iter().map(|s| s.probe_inconsistent)),
            collapsed: self.collapse.is_some(),
        }
    }
}

fn mean<I: Iterator<Item = f64>>(it: I) -> f64 {
    let (n, s) = it.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Per-sample loss bookkeeping produced by a method.
struct MethodOutput {
    loss: f64,
    selected: Vec<bool>,
    weights: Vec<f64>,
    /// `∂loss/∂z` per sample, already reduced over the batch.
    grads: Matrix,
    l_re: Option<Vec<(f64, f64)>>,
}

fn entropy_method(head: &AffineHead, forwards: &[Forward], hyper: Option<&RecapHyper>) -> MethodOutput {
    let b = forwards.len();
    let c = head.classes();
    let mut entropies = Vec::with_capacity(b);
    let mut dlogits = Matrix::zeros(b, c);
    let mut logp = vec![0.0; c];
    for (s, f) in forwards.iter().enumerate() {
        let h = region::entropy_of_logits(&f.logits, &mut logp);
        entropies.push(h);
        // ∂H/∂l_i = −p_i (log p_i + H)
        for (o, &lp) in dlogits.row_mut(s).iter_mut().zip(&logp) {
            *o = -math::exp(lp) * (lp + h);
        }
    }
    let (selected, weights): (Vec<bool>, Vec<f64>) = match hyper {
        None => (vec![true; b], vec![1.0; b]),
        Some(h) => entropies.iter().map(|&e| (h.selects(e), h.weight(e))).unzip(),
    };
    let n_sel = selected.iter().filter(|&&s| s).count();
    let denom = n_sel.max(1) as f64;
    let loss = entropies
        .iter()
        .zip(&selected)
        .zip(&weights)
        .filter(|((_, &s), _)| s)
        .map(|((e, _), w)| w * e)
        .sum::<f64>()
        / denom;
    let mut grads = Matrix::zeros(b, head.dim());
    for s in 0..b {
        if selected[s] {
            let mut g = head.weights().t_matvec(dlogits.row(s));
            g.iter_mut().for_each(|v| *v *= weights[s] / denom);
            grads.row_mut(s).copy_from_slice(&g);
        }
    }
    MethodOutput {
        loss,
        selected,
        weights,
        grads,
        l_re: None,
    }
}

/// Runs `method` over `stream`, mutating only `γ` and `β` of `backbone`.
pub fn run_stream<C: Clock>(
    backbone: &mut TinyBackbone,
    head: &AffineHead,
    stream: &[Batch],
    method: &MethodConfig,
    region: Option<&RegionSpec>,
    opts: &RunOptions,
    clock: &mut C,
) -> Result<MetricsLog> {
    Error::check_dim("classifier input", head.dim(), backbone.feature_dim())?;
    if method.kind == MethodKind::Recap && region.is_none() {
        return Err(Error::invalid("recap needs a region estimated from source features"));
    }
    let diag_region = region.or(opts.probe.as_ref().map(|p| &p.region));
    let proxy = diag_region.map(|r| RegionProxy::new(head, r)).transpose()?;
    let probe_proxy_region = opts.probe.as_ref();
    let mut probe_rng = opts.probe.as_ref().map(|p| p.seed.rng());

    let mut state = AdaptState::new(backbone.feature_dim(), method.lr, method.momentum);
    let mut log = MetricsLog {
        method: method.kind,
        steps: Vec::new(),
        batches: Vec::with_capacity(stream.len()),
        collapse: None,
    };
    let mut step = 0usize;
    let d = backbone.feature_dim();

    for (bi, batch) in stream.iter().enumerate() {
        let xs = batch.inputs();
        let t0 = clock.now_ns();

        let forwards = xs
            .iter_rows()
            .map(|x| {
                let mut f = backbone.features(x)?;
                f.logits = head.logits(&f.z)?;
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let preds: Vec<usize> = forwards.iter().map(|f| argmax(&f.logits)).collect();

        let out = match method.kind {
            MethodKind::None => None,
            MethodKind::Entropy => Some(entropy_method(head, &forwards, None)),
            MethodKind::EntropySelect => Some(entropy_method(head, &forwards, Some(&method.hyper))),
            MethodKind::Recap => {
                let proxy = proxy.as_ref().expect("checked above");
                let rows: Vec<&[f64]> = forwards.iter().map(|f| f.z.as_slice()).collect();
                let zs = Matrix::from_rows(&rows)?;
                let mut grads = Matrix::zeros(zs.rows(), d);
                let o = region::objective_impl(proxy, &zs, &method.hyper, Some(&mut grads))?;
                Some(MethodOutput {
                    loss: o.loss,
                    selected: o.samples.iter().map(|s| s.selected).collect(),
                    weights: o.samples.iter().map(|s| s.weight).collect(),
                    grads,
                    l_re: Some(o.samples.iter().map(|s| (s.l_re, s.l_ri)).collect()),
                })
            }
        };

        let mut backwards = 0;
        let mut selected_count = 0;
        let mut loss = 0.0;
        if let Some(o) = &out {
            loss = o.loss;
            selected_count = o.selected.iter().filter(|&&s| s).count();
            if !loss.is_finite() {
                log.collapse = Some(CollapseEvent {
                    batch: bi,
                    step,
                    reason: "non-finite loss".into(),
                    loss,
                    max_param_norm: backbone.max_param_norm(),
                });
            } else if selected_count > 0 {
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (f, g) in forwards.iter().zip(o.grads.iter_rows()) {
                    accumulate_norm_affine(&f.normalized, g, &mut gg, &mut gb);
                }
                state.step(backbone, &gg, &gb)?;
                backwards = 1;
            }
        }
        let step_ns = clock.now_ns().saturating_sub(t0);

        // metrics, outside the timed section
        let mut logp = vec![0.0; head.classes()];
        for (s, f) in forwards.iter().enumerate() {
            let entropy = region::entropy_of_logits(&f.logits, &mut logp);
            let (l_re, l_ri) = match (&out, &proxy) {
                (Some(MethodOutput { l_re: Some(v), .. }), _) => v[s],
                (_, Some(p)) => {
                    let t = p.eval_logits(&f.logits, None);
                    (t.l_re, t.l_ri)
                }
                _ => (f64::NAN, f64::NAN),
            };
            let (probe_kl, probe_inconsistent) = match (probe_proxy_region, probe_rng.as_mut()) {
                (Some(cfg), Some(rng)) => {
                    let r = consistency_probe(head, &f.z, &cfg.region, cfg.neighbors, rng)?;
                    (r.mean_kl, r.inconsistent_fraction)
                }
                _ => (f64::NAN, f64::NAN),
            };
            let (selected, weight) = match &out {
                Some(o) => (o.selected[s], o.weights[s]),
                None => (false, 0.0),
            };
            log.steps.push(StepRecord {
                step,
                batch: bi,
                domain: batch.domains()[s],
                y_true: batch.labels()[s],
                y_pred: preds[s],
                entropy,
                l_re,
                l_ri,
                selected,
                weight,
                probe_kl,
                probe_inconsistent,
            });
            step += 1;
        }
        log.batches.push(BatchStats {
            batch: bi,
            size: batch.len(),
            forwards: 1,
            backwards,
            selected: selected_count,
            loss,
            step_ns,
        });

        if log.collapse.is_some() {
            break;
        }
        let norm = backbone.max_param_norm();
        if !backbone.all_finite() || norm > DIVERGENCE_NORM {
            log.collapse = Some(CollapseEvent {
                batch: bi,
                step,
                reason: "parameter norm exceeded limit".into(),
                loss,
                max_param_norm: norm,
            });
            break;
        }
    }
    Ok(log)
}
