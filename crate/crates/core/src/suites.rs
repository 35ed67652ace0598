//! Verification suites over random instances.
//!
//! Each suite returns a [`SuiteReport`] with pass counts and the offending
//! instances, so the CLI can print and serialize failures for replay. The
//! closed forms under test are passed in as closures; mutation tests swap in
//! deliberately broken ones.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{backward_norm_affine, ModelShape, TinyBackbone};
use crate::numerics::{self, central_diff_grad, grad_rel_error, standard_normal, uniform, uniform_int, Matrix, Seed};
use crate::oracle::{self, RandomInstance};
use crate::region::{self, AffineHead, RecapHyper, RegionProxy, RegionSpec};

/// MC margin for stochastic inequalities, in standard errors.
pub const MC_SIGMAS: f64 = 3.0;
/// Samples per MC estimate in the dominance suites.
pub const MC_SAMPLES: usize = 20_000;
pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub index: usize,
    pub detail: String,
    /// Set when the failing case is a head/region/feature instance.
    pub instance: Option<RandomInstance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub total: usize,
    pub passed: usize,
    pub failures: Vec<Failure>,
    /// Smallest slack (bound minus estimate) or largest error seen, per suite.
    pub worst: f64,
}

impl SuiteReport {
    fn new(name: &'static str) -> Self {
        SuiteReport {
            name,
            total: 0,
            passed: 0,
            failures: Vec::new(),
            worst: f64::NAN,
        }
    }

    fn record(&mut self, index: usize, ok: bool, detail: impl FnOnce() -> String, instance: Option<&RandomInstance>) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(Failure {
                index,
                detail: detail(),
                instance: instance.cloned(),
            });
        }
    }

    fn track_min(&mut self, v: f64) {
        self.worst = if self.worst.is_nan() { v } else { self.worst.min(v) };
    }

    fn track_max(&mut self, v: f64) {
        self.worst = if self.worst.is_nan() { v } else { self.worst.max(v) };
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

/// `L_RE` as a function of an instance.
pub type ProxyFn<'a> = &'a dyn Fn(&RandomInstance) -> f64;
/// `∂(L_RE + λ L_RI)/∂z` as a function of an instance and `λ`.
pub type GradFn<'a> = &'a dyn Fn(&RandomInstance, f64) -> Vec<f64>;

pub fn regional_entropy_of(inst: &RandomInstance) -> f64 {
    region::regional_entropy(&inst.z, &inst.head, &inst.region).expect("consistent instance")
}

pub fn regional_instability_of(inst: &RandomInstance) -> f64 {
    region::regional_instability(&inst.z, &inst.head, &inst.region).expect("consistent instance")
}

pub fn grad_z_of(inst: &RandomInstance, lambda: f64) -> Vec<f64> {
    region::grad_z_objective(&inst.z, &inst.head, &inst.region, lambda).expect("consistent instance")
}

/// Finite-sample entropy inequality on `sets` random feature sets with
/// `N ∈ 1..=64`, `C ≤ 10`. Deterministic, tolerance `1e-9`.
pub fn lemma1_suite(seed: Seed, sets: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("lemma1");
    let mut rng = seed.rng();
    for t in 0..sets {
        let c = uniform_int(&mut rng, 2, 10);
        let d = uniform_int(&mut rng, 2, 16);
        let inst = RandomInstance::draw_with_shape(&mut rng, c, d);
        let n = uniform_int(&mut rng, 1, 64);
        let spread = 0.5 + 2.0 * uniform(&mut rng);
        let data: Vec<f64> = (0..n * d).map(|_| spread * standard_normal(&mut rng)).collect();
        let features = Matrix::from_vec(n, d, data)?;
        let s = oracle::lemma1_sides(&features, &inst.head)?;
        let slack = s.rhs - s.lhs;
        report.track_min(slack);
        report.record(t, s.lhs <= s.rhs + 1e-9, || format!("lhs {} > rhs {} (N={n}, C={c})", s.lhs, s.rhs), Some(&inst));
    }
    Ok(report)
}

/// Negative log-likelihood bound: MC side within `3σ` of the closed side on
/// random instances, plus exact agreement at zero variance.
pub fn lemma2_suite(seed: Seed, instances: usize, n: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("lemma2");
    let mut rng = seed.rng();
    for t in 0..instances {
        let inst = RandomInstance::draw(&mut rng);
        let class = uniform_int(&mut rng, 0, inst.head.classes() - 1);
        let s = oracle::lemma2_sides(seed.derive(t as u64), &inst.z, &inst.head, &inst.region, class, n)?;
        report.track_min(s.closed_rhs + MC_SIGMAS * s.mc_lhs.stderr - s.mc_lhs.mean);
        report.record(
            t,
            s.mc_lhs.within(s.closed_rhs, MC_SIGMAS),
            || format!("class {class}: mc {} ± {} > closed {}", s.mc_lhs.mean, s.mc_lhs.stderr, s.closed_rhs),
            Some(&inst),
        );
        let zero = inst.with_zero_variance();
        let s0 = oracle::lemma2_sides(seed.derive(t as u64), &zero.z, &zero.head, &zero.region, class, 2)?;
        report.record(
            t,
            (s0.mc_lhs.mean - s0.closed_rhs).abs() <= 1e-10,
            || format!("zero variance: mc {} != closed {}", s0.mc_lhs.mean, s0.closed_rhs),
            Some(&zero),
        );
    }
    Ok(report)
}

/// `MC(E[H]) ≤ L_RE + 3σ` on random instances.
pub fn prop1_dominance_suite(seed: Seed, instances: usize, n: usize, l_re: ProxyFn<'_>) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("prop1");
    let mut rng = seed.rng();
    for t in 0..instances {
        let inst = RandomInstance::draw(&mut rng);
        let mc = oracle::mc_bias_term(seed.derive(t as u64), &inst.z, &inst.head, &inst.region, n)?;
        let bound = l_re(&inst);
        report.track_min(bound + MC_SIGMAS * mc.stderr - mc.mean);
        report.record(
            t,
            mc.within(bound, MC_SIGMAS),
            || format!("mc entropy {} ± {} > L_RE {bound} (tau {})", mc.mean, mc.stderr, inst.region.tau()),
            Some(&inst),
        );
    }
    Ok(report)
}

/// `MC(E[KL]) ≤ L_RI + 3σ` on random instances.
pub fn prop2_dominance_suite(seed: Seed, instances: usize, n: usize, l_ri: ProxyFn<'_>) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("prop2");
    let mut rng = seed.rng();
    for t in 0..instances {
        let inst = RandomInstance::draw(&mut rng);
        let mc = oracle::mc_variance_term(seed.derive(t as u64), &inst.z, &inst.head, &inst.region, n)?;
        let bound = l_ri(&inst);
        report.track_min(bound + MC_SIGMAS * mc.stderr - mc.mean);
        report.record(
            t,
            mc.within(bound, MC_SIGMAS),
            || format!("mc kl {} ± {} > L_RI {bound}", mc.mean, mc.stderr),
            Some(&inst),
        );
    }
    Ok(report)
}

/// At zero variance: `|L_RE − H| ≤ 1e-10` and `L_RI ≤ 1e-12`.
pub fn degeneration_suite(seed: Seed, instances: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("degeneration");
    let mut rng = seed.rng();
    for t in 0..instances {
        let inst = RandomInstance::draw(&mut rng).with_zero_variance();
        let h = region::entropy_loss(inst.head.probabilities(&inst.z)?.as_slice())?;
        let l_re = regional_entropy_of(&inst);
        let l_ri = regional_instability_of(&inst);
        let err = (l_re - h).abs().max(l_ri.abs() * 100.0);
        report.track_max(err);
        report.record(
            t,
            (l_re - h).abs() <= 1e-10 && l_ri.abs() <= 1e-12,
            || format!("L_RE {l_re} vs H {h}, L_RI {l_ri}"),
            Some(&inst),
        );
    }
    Ok(report)
}

/// `L_RI` non-decreasing over `τ ∈ {0.1, 0.5, 1.0, 1.2, 2.5}`.
pub fn monotonicity_suite(seed: Seed, instances: usize) -> Result<SuiteReport> {
    const TAUS: [f64; 5] = [0.1, 0.5, 1.0, 1.2, 2.5];
    let mut report = SuiteReport::new("monotonicity");
    let mut rng = seed.rng();
    for t in 0..instances {
        let inst = RandomInstance::draw(&mut rng);
        let values = TAUS
            .iter()
            .map(|&tau| {
                let r = inst.region.with_tau(tau)?;
                region::regional_instability(&inst.z, &inst.head, &r)
            })
            .collect::<Result<Vec<f64>>>()?;
        let worst_drop = values.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
        report.track_max(worst_drop);
        report.record(t, worst_drop <= 0.0, || format!("L_RI over tau grid {values:?}"), Some(&inst));
    }
    Ok(report)
}

/// Bias-shift invariance (≤ 1e-12), nonnegativity, selection/weight coupling.
pub fn invariance_suite(seed: Seed, instances: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("invariance");
    let mut rng = seed.rng();
    for t in 0..instances {
        let inst = RandomInstance::draw(&mut rng);
        let shift = -100.0 + 200.0 * uniform(&mut rng);
        let shifted_bias: Vec<f64> = inst.head.bias().iter().map(|b| b + shift).collect();
        let shifted = AffineHead::new(inst.head.weights().clone(), shifted_bias)?;
        let base = RegionProxy::new(&inst.head, &inst.region)?.terms(&inst.z)?;
        let moved = RegionProxy::new(&shifted, &inst.region)?.terms(&inst.z)?;
        let p = inst.head.probabilities(&inst.z)?;
        let q = shifted.probabilities(&inst.z)?;
        let dp = p.as_slice().iter().zip(q.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let err = dp.max((base.l_re - moved.l_re).abs()).max((base.l_ri - moved.l_ri).abs());
        report.track_max(err);
        report.record(t, err <= 1e-12, || format!("bias shift {shift}: max change {err}"), Some(&inst));
        report.record(
            t,
            base.l_re >= 0.0 && base.l_ri >= 0.0,
            || format!("negative proxy: L_RE {}, L_RI {}", base.l_re, base.l_ri),
            Some(&inst),
        );

        let d = inst.head.dim();
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..d).map(|_| 2.0 * standard_normal(&mut rng)).collect()).collect();
        let zs = Matrix::from_rows(&rows)?;
        let hyper = RecapHyper::new(0.5, 3.0 * uniform(&mut rng), 0.1 + 2.0 * uniform(&mut rng))?;
        let out = region::recap_objective(&zs, &inst.head, &inst.region, &hyper)?;
        let coupled = out.samples.iter().all(|s| s.selected == (s.l_re < hyper.tau_re))
            && hyper.weight(hyper.l0) == 1.0
            && out.samples.iter().all(|a| {
                out.samples
                    .iter()
                    .all(|b| !(a.l_re < b.l_re) || a.weight > b.weight || a.weight == b.weight && a.l_re == b.l_re)
            });
        report.record(t, coupled, || "selection/weight coupling violated".into(), Some(&inst));
    }
    Ok(report)
}

/// Analytic `∂(L_RE + λ L_RI)/∂z` against central differences of the
/// closed forms, `λ = 0.5`.
pub fn gradz_suite(seed: Seed, instances: usize, grad: GradFn<'_>) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradz");
    let mut rng = seed.rng();
    let lambda = 0.5;
    for t in 0..instances {
        let inst = RandomInstance::draw(&mut rng);
        let analytic = grad(&inst, lambda);
        let proxy = RegionProxy::new(&inst.head, &inst.region)?;
        let fd = central_diff_grad(
            |z| {
                let terms = proxy.terms(z).expect("consistent instance");
                terms.l_re + lambda * terms.l_ri
            },
            &inst.z,
            GRAD_STEP,
        )?;
        let err = grad_rel_error(&analytic, &fd);
        report.track_max(err);
        report.record(t, err <= GRAD_TOL, || format!("relative error {err:e}"), Some(&inst));
    }
    Ok(report)
}

/// A small random backbone, head, region and input batch.
#[derive(Debug, Clone)]
pub struct AffineGradCase {
    pub backbone: TinyBackbone,
    pub head: AffineHead,
    pub region: RegionSpec,
    pub inputs: Matrix,
    pub hyper: RecapHyper,
}

impl AffineGradCase {
    pub fn draw(seed: Seed) -> Result<Self> {
        let mut rng = seed.rng();
        let shape = ModelShape {
            input_dim: uniform_int(&mut rng, 2, 8),
            hidden_dim: uniform_int(&mut rng, 2, 10),
            feature_dim: uniform_int(&mut rng, 2, 8),
            classes: uniform_int(&mut rng, 2, 6),
        };
        let (mut backbone, head) = TinyBackbone::init(shape, seed.derive(1))?;
        let gamma: Vec<f64> = (0..shape.feature_dim).map(|_| 0.5 + uniform(&mut rng)).collect();
        let beta: Vec<f64> = (0..shape.feature_dim).map(|_| 0.3 * standard_normal(&mut rng)).collect();
        backbone.set_affine(&gamma, &beta)?;
        let sigma: Vec<f64> = (0..shape.feature_dim).map(|_| standard_normal(&mut rng).abs()).collect();
        let region = RegionSpec::new(sigma, RandomInstance::TAUS[uniform_int(&mut rng, 0, 2)])?;
        let b = uniform_int(&mut rng, 1, 6);
        let inputs = Matrix::from_vec(b, shape.input_dim, (0..b * shape.input_dim).map(|_| standard_normal(&mut rng)).collect())?;
        let ln_c = (shape.classes as f64).ln();
        // generous threshold so most samples contribute
        let hyper = RecapHyper::new(0.5, 2.0 * ln_c + 1.0, 0.7 * ln_c)?;
        Ok(AffineGradCase {
            backbone,
            head,
            region,
            inputs,
            hyper,
        })
    }

    fn features(&self, backbone: &TinyBackbone) -> Matrix {
        let rows: Vec<Vec<f64>> = self.inputs.iter_rows().map(|x| backbone.features(x).expect("shape").z).collect();
        Matrix::from_rows(&rows).expect("uniform rows")
    }

    /// `(∂/∂γ, ∂/∂β)` of the batch objective via the analytic chain.
    pub fn analytic(&self) -> Result<Vec<f64>> {
        let zs = self.features(&self.backbone);
        let (_, gz) = region::recap_objective_with_grad(&zs, &self.head, &self.region, &self.hyper)?;
        let d = self.backbone.feature_dim();
        let mut gg = vec![0.0; d];
        let mut gb = vec![0.0; d];
        for (x, g) in self.inputs.iter_rows().zip(gz.iter_rows()) {
            let (a, b) = backward_norm_affine(x, &self.backbone, g)?;
            numerics::axpy(1.0, &a, &mut gg);
            numerics::axpy(1.0, &b, &mut gb);
        }
        gg.extend_from_slice(&gb);
        Ok(gg)
    }

    /// Central differences of the batch objective with weights and
    /// selection frozen at the base parameters.
    pub fn finite_difference(&self) -> Result<Vec<f64>> {
        let base = region::recap_objective(&self.features(&self.backbone), &self.head, &self.region, &self.hyper)?;
        let frozen: Vec<(bool, f64)> = base.samples.iter().map(|s| (s.selected, s.weight)).collect();
        let n_sel = frozen.iter().filter(|f| f.0).count().max(1) as f64;
        let d = self.backbone.feature_dim();
        let theta: Vec<f64> = self.backbone.gamma().iter().chain(self.backbone.beta()).copied().collect();
        let lambda = self.hyper.lambda;
        central_diff_grad(
            |t| {
                let mut probe = self.backbone.clone();
                probe.set_affine(&t[..d], &t[d..]).expect("shape");
                let out = region::recap_objective(&self.features(&probe), &self.head, &self.region, &self.hyper).expect("shape");
                out.samples
                    .iter()
                    .zip(&frozen)
                    .filter(|(_, f)| f.0)
                    .map(|(s, f)| f.1 * (s.l_re + lambda * s.l_ri))
                    .sum::<f64>()
                    / n_sel
            },
            &theta,
            GRAD_STEP,
        )
    }
}

/// End-to-end `(γ, β)` gradient through backbone and objective.
pub fn affine_grad_suite(seed: Seed, configs: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("affine_grad");
    for t in 0..configs {
        let case = AffineGradCase::draw(seed.derive(t as u64))?;
        let err = grad_rel_error(&case.analytic()?, &case.finite_difference()?);
        report.track_max(err);
        report.record(t, err <= GRAD_TOL, || format!("config {t}: relative error {err:e}"), None);
    }
    Ok(report)
}
