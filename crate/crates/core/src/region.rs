//! Gaussian feature regions and the closed-form region-confidence proxies.
//!
//! A region around a feature `z` is `N(z, τ·diag(σ²))`, with `σ²` the
//! per-coordinate variance of source features. For an affine classifier
//! `softmax(A z + b)` two closed forms summarize the region:
//!
//! * Regional Entropy,
//!   `L_RE = Σ_j p̄_j · log Σ_i exp[(a_i−a_j)·z + (b_i−b_j) + ½(a_i−a_j)Σ'(a_i−a_j)ᵀ]`,
//!   where `p̄` is the softmax of the variance-augmented logits
//!   `a_i·z + b_i + ½ a_i Σ' a_iᵀ`.
//! * Regional Instability,
//!   `L_RI = Σ_j p_j · log Σ_i p_i · exp[½(a_i−a_j)Σ'(a_i−a_j)ᵀ]`.
//!
//! Neither needs sampling. The quadratic forms depend only on the head and
//! the region, so [`RegionProxy`] computes them once and every per-feature
//! evaluation costs `O(C·d + C²)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{self, lse, Matrix, ProbVector};

/// Classifier coefficients: `C × d` weights (rows `a_i`) and `C` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineHead {
    weights: Matrix,
    bias: Vec<f64>,
}

impl AffineHead {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::invalid("classifier needs at least 2 classes"));
        }
        if weights.cols() < 1 {
            return Err(Error::invalid("feature dimension must be >= 1"));
        }
        Error::check_dim("classifier bias", weights.rows(), bias.len())?;
        if !weights.all_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("classifier coefficients must be finite"));
        }
        Ok(AffineHead { weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub(crate) fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn logits_into(&self, z: &[f64], out: &mut [f64]) {
        self.weights.matvec_into(z, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_feature(z)?;
        let mut out = vec![0.0; self.classes()];
        self.logits_into(z, &mut out);
        Ok(out)
    }

    /// `softmax(A z + b)`.
    pub fn probabilities(&self, z: &[f64]) -> Result<ProbVector> {
        numerics::softmax(&self.logits(z)?)
    }

    pub(crate) fn check_feature(&self, z: &[f64]) -> Result<()> {
        Error::check_dim("feature", self.dim(), z.len())
    }
}

/// Diagonal source-feature variances and the scope multiplier `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    sigma_diag: Vec<f64>,
    tau: f64,
}

impl RegionSpec {
    pub fn new(sigma_diag: Vec<f64>, tau: f64) -> Result<Self> {
        if sigma_diag.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("region variances must be finite and >= 0"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("region scale tau must be positive"));
        }
        Ok(RegionSpec { sigma_diag, tau })
    }

    pub fn sigma_diag(&self) -> &[f64] {
        &self.sigma_diag
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.sigma_diag.len()
    }

    /// Same variances, different scope.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        RegionSpec::new(self.sigma_diag.clone(), tau)
    }

    /// `τ · σ²`, the covariance diagonal actually used.
    pub fn effective_cov(&self) -> Vec<f64> {
        self.sigma_diag.iter().map(|s| s * self.tau).collect()
    }

    pub fn effective_std(&self) -> Vec<f64> {
        self.sigma_diag.iter().map(|s| math::sqrt(s * self.tau)).collect()
    }
}

/// Per-coordinate population variance (divide by `n`) of source features.
pub fn estimate_region(source_features: &Matrix, tau: f64) -> Result<RegionSpec> {
    let n = source_features.rows();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, found: n });
    }
    let d = source_features.cols();
    let mut mean = vec![0.0; d];
    for row in source_features.iter_rows() {
        numerics::axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in source_features.iter_rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    RegionSpec::new(var, tau)
}

/// Selection threshold, weighting anchor and variance-term weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecapHyper {
    pub lambda: f64,
    pub tau_re: f64,
    pub l0: f64,
}

impl RecapHyper {
    pub const DEFAULT_LAMBDA: f64 = 0.5;
    pub const DEFAULT_L0_FRACTION: f64 = 0.7;
    pub const DEFAULT_TAU_RE_FRACTION: f64 = 0.8;

    pub fn new(lambda: f64, tau_re: f64, l0: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if !(l0 > 0.0) || !l0.is_finite() {
            return Err(Error::invalid("l0 must be > 0"));
        }
        // tau_re = 0 is accepted: it disables selection entirely.
        if !(tau_re >= 0.0) {
            return Err(Error::invalid("tau_re must be >= 0"));
        }
        Ok(RecapHyper { lambda, tau_re, l0 })
    }

    /// Small-network defaults: `λ = 0.5`, `L0 = 0.7 ln C`, `τ_RE = 0.8 ln C`.
    pub fn for_classes(classes: usize) -> Self {
        let ln_c = math::ln(classes as f64);
        RecapHyper {
            lambda: Self::DEFAULT_LAMBDA,
            tau_re: Self::DEFAULT_TAU_RE_FRACTION * ln_c,
            l0: Self::DEFAULT_L0_FRACTION * ln_c,
        }
    }

    pub fn selects(&self, score: f64) -> bool {
        score < self.tau_re
    }

    /// `α = exp(L0 − score)`; no cap is applied.
    pub fn weight(&self, score: f64) -> f64 {
        math::exp(self.l0 - score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub l_re: f64,
    pub l_ri: f64,
    pub selected: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutcome {
    pub samples: Vec<SampleOutcome>,
    /// Weighted mean of `L_RE + λ L_RI` over selected samples; 0 when none are.
    pub loss: f64,
    pub selected_count: usize,
}

impl ObjectiveOutcome {
    /// When false the caller must skip the parameter update.
    pub fn has_selection(&self) -> bool {
        self.selected_count > 0
    }
}

/// `−Σ p_i ln p_i` with `0 ln 0 = 0`.
pub fn entropy_loss(p: &[f64]) -> Result<f64> {
    let p = ProbVector::new(p.to_vec())?;
    Ok(entropy_unchecked(p.as_slice()))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * math::ln(x))
        .sum();
    h.max(0.0)
}

/// Entropy of `softmax(logits)` computed from log-probabilities.
pub(crate) fn entropy_of_logits(logits: &[f64], logp: &mut [f64]) -> f64 {
    numerics::log_softmax_into(logits, logp);
    let h: f64 = logp
        .iter()
        .map(|&lp| {
            let p = math::exp(lp);
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

fn check_region(head: &AffineHead, region: &RegionSpec) -> Result<()> {
    Error::check_dim("region", head.dim(), region.dim())
}

/// Above this, `exp(q_ij)` risks overflow and the proxy falls back to
/// per-element log-sum-exp.
const EXP_TABLE_MAX_Q: f64 = 600.0;

/// The head/region pair with all quadratic forms precomputed.
#[derive(Debug, Clone)]
pub struct RegionProxy<'a> {
    head: &'a AffineHead,
    /// `½ a_i Σ' a_iᵀ`
    self_quad: Vec<f64>,
    /// `½ (a_i−a_j) Σ' (a_i−a_j)ᵀ`, row-major `C × C`, symmetric.
    pair_quad: Vec<f64>,
    /// `exp(pair_quad)` when every entry is small enough.
    exp_pair: Option<Vec<f64>>,
}

/// `L_RE`, `L_RI` and, optionally, the gradient of `L_RE + λ L_RI` with
/// respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTerms {
    pub l_re: f64,
    pub l_ri: f64,
}

impl<'a> RegionProxy<'a> {
    pub fn new(head: &'a AffineHead, region: &RegionSpec) -> Result<Self> {
        check_region(head, region)?;
        let c = head.classes();
        let cov = region.effective_cov();
        let a = head.weights();
        let self_quad: Vec<f64> = a
            .iter_rows()
            .map(|row| 0.5 * row.iter().zip(&cov).map(|(x, s)| s * x * x).sum::<f64>())
            .collect();
        let mut pair_quad = vec![0.0; c * c];
        for i in 0..c {
            for j in (i + 1)..c {
                let q: f64 = a
                    .row(i)
                    .iter()
                    .zip(a.row(j))
                    .zip(&cov)
                    .map(|((x, y), s)| s * (x - y) * (x - y))
                    .sum::<f64>()
                    * 0.5;
                pair_quad[i * c + j] = q;
                pair_quad[j * c + i] = q;
            }
        }
        let exp_pair = pair_quad
            .iter()
            .all(|&q| q <= EXP_TABLE_MAX_Q)
            .then(|| pair_quad.iter().map(|&q| math::exp(q)).collect());
        Ok(RegionProxy {
            head,
            self_quad,
            pair_quad,
            exp_pair,
        })
    }

    pub fn head(&self) -> &AffineHead {
        self.head
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Softmax of the variance-augmented logits.
    pub fn augmented_probability_from_logits(&self, logits: &[f64]) -> ProbVector {
        let aug: Vec<f64> = logits.iter().zip(&self.self_quad).map(|(l, q)| l + q).collect();
        let mut p = vec![0.0; aug.len()];
        numerics::softmax_into(&aug, &mut p);
        ProbVector::new(p).expect("softmax output is a probability vector")
    }

    pub fn regional_entropy_from_logits(&self, logits: &[f64]) -> f64 {
        self.eval_logits(logits, None).l_re
    }

    pub fn regional_instability_from_logits(&self, logits: &[f64]) -> f64 {
        let pairs = self.pairs();
        instability(logits, &pairs, None)
    }

    /// Both proxies at feature `z`.
    pub fn terms(&self, z: &[f64]) -> Result<ProxyTerms> {
        let logits = self.head.logits(z)?;
        Ok(self.eval_logits(&logits, None))
    }

    /// Both proxies and `∂(L_RE + λ L_RI)/∂z`.
    pub fn terms_and_grad(&self, z: &[f64], lambda: f64) -> Result<(ProxyTerms, Vec<f64>)> {
        let logits = self.head.logits(z)?;
        let mut dlogits = vec![0.0; logits.len()];
        let terms = self.eval_logits(&logits, Some((lambda, &mut dlogits)));
        Ok((terms, self.head.weights().t_matvec(&dlogits)))
    }

    fn pairs(&self) -> PairTable<'_> {
        PairTable {
            quad: &self.pair_quad,
            exp: self.exp_pair.as_deref(),
        }
    }

    /// Core evaluation. With `grad = Some((λ, out))`, `out` receives the
    /// gradient of `L_RE + λ L_RI` with respect to the logits.
    pub(crate) fn eval_logits(&self, logits: &[f64], grad: Option<(f64, &mut [f64])>) -> ProxyTerms {
        let c = logits.len();
        let pairs = self.pairs();
        // everything below depends on logit differences only; centering once
        // keeps large common offsets out of the rounding
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let centered: Vec<f64> = logits.iter().map(|l| l - top).collect();
        let logits = centered.as_slice();

        let aug: Vec<f64> = logits.iter().zip(&self.self_quad).map(|(l, s)| l + s).collect();
        let mut pbar = vec![0.0; c];
        numerics::softmax_into(&aug, &mut pbar);

        // inner[j] = lse_i(l_i + q_ij) − l_j
        let mut inner = vec![0.0; c];
        let mut resp = if grad.is_some() { vec![0.0; c * c] } else { Vec::new() };
        pairs.column_lse(logits, &mut inner, (!resp.is_empty()).then_some(resp.as_mut_slice()));
        let mut l_re = 0.0;
        for j in 0..c {
            inner[j] -= logits[j];
            l_re += pbar[j] * inner[j];
        }

        match grad {
            None => ProxyTerms {
                l_re,
                l_ri: instability(logits, &pairs, None),
            },
            Some((lambda, out)) => {
                for k in 0..c {
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += pbar[j] * resp[j * c + k];
                    }
                    out[k] = acc - pbar[k] + pbar[k] * (inner[k] - l_re);
                }
                let mut ri_grad = vec![0.0; c];
                let l_ri = instability(logits, &pairs, Some(&mut ri_grad));
                for (o, g) in out.iter_mut().zip(&ri_grad) {
                    *o += lambda * g;
                }
                ProxyTerms { l_re, l_ri }
            }
        }
    }
}

/// Pairwise quadratic table with its optional exponentiated copy.
struct PairTable<'q> {
    quad: &'q [f64],
    exp: Option<&'q [f64]>,
}

impl PairTable<'_> {
    /// `out[j] = lse_i(base_i + q_ij)`; `resp[j*C + i]` receives the softmax
    /// over `i` of the same terms. Expects `max_i base_i = 0` up to rounding.
    fn column_lse(&self, base: &[f64], out: &mut [f64], resp: Option<&mut [f64]>) {
        let c = base.len();
        match self.exp {
            Some(e) => {
                // exp(base_i + q_ij) = exp(base_i) exp(q_ij): C exps instead of C²
                let w: Vec<f64> = base.iter().map(|&b| math::exp(b)).collect();
                let mut sums = vec![0.0; c];
                for i in 0..c {
                    let row = &e[i * c..(i + 1) * c];
                    for j in 0..c {
                        sums[j] += w[i] * row[j];
                    }
                }
                for j in 0..c {
                    out[j] = math::ln(sums[j]);
                }
                if let Some(r) = resp {
                    for j in 0..c {
                        let inv = 1.0 / sums[j];
                        for i in 0..c {
                            r[j * c + i] = w[i] * e[i * c + j] * inv;
                        }
                    }
                }
            }
            None => {
                let mut col = vec![0.0; c];
                let mut resp = resp;
                for j in 0..c {
                    for i in 0..c {
                        col[i] = base[i] + self.quad[i * c + j];
                    }
                    let v = lse(&col);
                    out[j] = v;
                    if let Some(r) = resp.as_deref_mut() {
                        for i in 0..c {
                            r[j * c + i] = math::exp(col[i] - v);
                        }
                    }
                }
            }
        }
    }
}

fn instability(logits: &[f64], pairs: &PairTable<'_>, grad: Option<&mut [f64]>) -> f64 {
    let c = logits.len();
    let mut logp = vec![0.0; c];
    numerics::log_softmax_into(logits, &mut logp);
    let p: Vec<f64> = logp.iter().map(|&l| math::exp(l)).collect();

    let mut inner = vec![0.0; c];
    let mut resp = if grad.is_some() { vec![0.0; c * c] } else { Vec::new() };
    pairs.column_lse(&logp, &mut inner, (!resp.is_empty()).then_some(resp.as_mut_slice()));
    let total: f64 = p.iter().zip(&inner).map(|(pj, v)| pj * v).sum();
    if let Some(out) = grad {
        for k in 0..c {
            let mut acc = 0.0;
            for j in 0..c {
                acc += p[j] * resp[j * c + k];
            }
            out[k] = acc - p[k] + p[k] * (inner[k] - total);
        }
    }
    total.max(0.0)
}

/// `Σ_j p_j log Σ_i p_i exp(q_ij)` from logits and the pairwise quadratic
/// table, optionally with its logit gradient. Works for any `C >= 1`.
pub fn regional_instability_kernel(logits: &[f64], pair_quad: &[f64], grad: Option<&mut [f64]>) -> f64 {
    debug_assert_eq!(pair_quad.len(), logits.len() * logits.len());
    let pairs = PairTable { quad: pair_quad, exp: None };
    instability(logits, &pairs, grad)
}

/// Softmax of the logits `a_i·z + b_i + ½ a_i Σ' a_iᵀ`.
pub fn augmented_probability(z: &[f64], head: &AffineHead, region: &RegionSpec) -> Result<ProbVector> {
    let proxy = RegionProxy::new(head, region)?;
    let logits = head.logits(z)?;
    Ok(proxy.augmented_probability_from_logits(&logits))
}

pub fn regional_entropy(z: &[f64], head: &AffineHead, region: &RegionSpec) -> Result<f64> {
    Ok(RegionProxy::new(head, region)?.terms(z)?.l_re)
}

pub fn regional_instability(z: &[f64], head: &AffineHead, region: &RegionSpec) -> Result<f64> {
    let proxy = RegionProxy::new(head, region)?;
    let logits = head.logits(z)?;
    Ok(proxy.regional_instability_from_logits(&logits))
}

/// `∂(L_RE + λ L_RI)/∂z` with weights and selection treated as constants.
pub fn grad_z_objective(z: &[f64], head: &AffineHead, region: &RegionSpec, lambda: f64) -> Result<Vec<f64>> {
    Ok(RegionProxy::new(head, region)?.terms_and_grad(z, lambda)?.1)
}

/// Selected, weighted objective over a batch of features (rows of `zs`).
pub fn recap_objective(zs: &Matrix, head: &AffineHead, region: &RegionSpec, hyper: &RecapHyper) -> Result<ObjectiveOutcome> {
    let proxy = RegionProxy::new(head, region)?;
    objective_impl(&proxy, zs, hyper, None)
}

/// As [`recap_objective`], also returning `∂loss/∂z` for every row of `zs`
/// (zero rows for unselected samples).
pub fn recap_objective_with_grad(
    zs: &Matrix,
    head: &AffineHead,
    region: &RegionSpec,
    hyper: &RecapHyper,
) -> Result<(ObjectiveOutcome, Matrix)> {
    let proxy = RegionProxy::new(head, region)?;
    let mut grads = Matrix::zeros(zs.rows(), zs.cols());
    let out = objective_impl(&proxy, zs, hyper, Some(&mut grads))?;
    Ok((out, grads))
}

pub(crate) fn objective_impl(
    proxy: &RegionProxy<'_>,
    zs: &Matrix,
    hyper: &RecapHyper,
    mut grads: Option<&mut Matrix>,
) -> Result<ObjectiveOutcome> {
    if zs.rows() == 0 {
        return Err(Error::invalid("objective needs a non-empty batch"));
    }
    let head = proxy.head();
    Error::check_dim("feature", head.dim(), zs.cols())?;
    let c = head.classes();
    let mut logits = vec![0.0; c];
    let mut dlogits = vec![0.0; c];
    let mut samples = Vec::with_capacity(zs.rows());
    for (s, z) in zs.iter_rows().enumerate() {
        head.logits_into(z, &mut logits);
        let terms = if grads.is_some() {
            proxy.eval_logits(&logits, Some((hyper.lambda, &mut dlogits)))
        } else {
            proxy.eval_logits(&logits, None)
        };
        let selected = hyper.selects(terms.l_re);
        let weight = hyper.weight(terms.l_re);
        samples.push(SampleOutcome {
            l_re: terms.l_re,
            l_ri: terms.l_ri,
            selected,
            weight,
        });
        if let Some(g) = grads.as_deref_mut() {
            if selected {
                let gz = head.weights().t_matvec(&dlogits);
                g.row_mut(s).copy_from_slice(&gz);
            }
        }
    }
    let selected_count = samples.iter().filter(|s| s.selected).count();
    let denom = selected_count.max(1) as f64;
    let loss = samples
        .iter()
        .filter(|s| s.selected)
        .map(|s| s.weight * (s.l_re + hyper.lambda * s.l_ri))
        .sum::<f64>()
        / denom;
    if let Some(g) = grads {
        for (s, out) in samples.iter().enumerate() {
            if out.selected {
                g.row_mut(s).iter_mut().for_each(|v| *v *= out.weight / denom);
            }
        }
    }
    Ok(ObjectiveOutcome {
        samples,
        loss,
        selected_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_diff_grad, grad_rel_error, softmax, standard_normal, Seed, SeededRng};
    use crate::oracle::RandomInstance;
    use proptest::prelude::*;

    fn head_2x2() -> AffineHead {
        AffineHead::new(Matrix::from_rows(&[[1.0, -0.5], [0.2, 0.8]]).unwrap(), vec![0.1, -0.3]).unwrap()
    }

    #[test]
    fn head_validation() {
        let one_class = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(AffineHead::new(one_class, vec![0.0]).is_err());
        let m = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(AffineHead::new(m.clone(), vec![0.0]).is_err());
        assert!(AffineHead::new(m, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn exp_table_matches_lse_path() {
        let mut rng = Seed(41).rng();
        for _ in 0..200 {
            let inst = RandomInstance::draw(&mut rng);
            let fast = RegionProxy::new(&inst.head, &inst.region).unwrap();
            let mut slow = fast.clone();
            slow.exp_pair = None;
            let logits = inst.head.logits(&inst.z).unwrap();
            let c = logits.len();
            let (mut gf, mut gs) = (vec![0.0; c], vec![0.0; c]);
            let tf = fast.eval_logits(&logits, Some((0.5, &mut gf)));
            let ts = slow.eval_logits(&logits, Some((0.5, &mut gs)));
            assert!((tf.l_re - ts.l_re).abs() <= 1e-12 * (1.0 + ts.l_re.abs()));
            assert!((tf.l_ri - ts.l_ri).abs() <= 1e-12 * (1.0 + ts.l_ri.abs()));
            for (a, b) in gf.iter().zip(&gs) {
                assert!((a - b).abs() <= 1e-11, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn large_quadratics_skip_exp_table() {
        let head = AffineHead::new(Matrix::from_rows(&[[40.0], [-40.0]]).unwrap(), vec![0.0, 0.0]).unwrap();
        let region = RegionSpec::new(vec![1.0], 1.0).unwrap();
        let proxy = RegionProxy::new(&head, &region).unwrap();
        assert!(proxy.exp_pair.is_none());
        let t = proxy.terms(&[0.01]).unwrap();
        assert!(t.l_re.is_finite() && t.l_ri.is_finite());
    }

    #[test]
    fn region_validation() {
        assert!(RegionSpec::new(vec![1.0, -0.1], 1.0).is_err());
        assert!(RegionSpec::new(vec![1.0], 0.0).is_err());
        let r = RegionSpec::new(vec![1.0, 2.0], 1.2).unwrap();
        assert_eq!(r.effective_cov(), vec![1.2, 2.4]);
    }

    #[test]
    fn estimate_region_population_variance() {
        let f = Matrix::from_rows(&[[0.0, 5.0], [2.0, 5.0]]).unwrap();
        let r = estimate_region(&f, 1.2).unwrap();
        assert_eq!(r.sigma_diag(), &[1.0, 0.0]);
        assert_eq!(r.tau(), 1.2);
        let same = Matrix::from_rows(&[[3.0, -1.0]; 7]).unwrap();
        assert!(estimate_region(&same, 1.0).unwrap().sigma_diag().iter().all(|&v| v == 0.0));
        let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(estimate_region(&one, 1.0), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy_loss(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy_loss(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        // mpmath, 40 digits
        let h = entropy_loss(&[0.7, 0.2, 0.1]).unwrap();
        assert!((h - 0.801_818_552_543_337_3).abs() < 1e-15);
        assert!(entropy_loss(&[0.7, 0.7]).is_err());
    }

    #[test]
    fn augmented_probability_degenerate_cases() {
        let head = head_2x2();
        let z = [0.3, -1.1];
        let zero = RegionSpec::new(vec![0.0, 0.0], 1.2).unwrap();
        let p = augmented_probability(&z, &head, &zero).unwrap();
        let q = softmax(&head.logits(&z).unwrap()).unwrap();
        assert_eq!(p, q);

        let flat = AffineHead::new(Matrix::zeros(3, 2), vec![0.0; 3]).unwrap();
        let wide = RegionSpec::new(vec![4.0, 9.0], 2.5).unwrap();
        let p = augmented_probability(&z, &flat, &wide).unwrap();
        assert!(p.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));

        let bad = RegionSpec::new(vec![1.0], 1.0).unwrap();
        assert!(augmented_probability(&z, &head, &bad).is_err());
        assert!(augmented_probability(&[1.0], &head, &zero).is_err());
    }

    #[test]
    fn regional_entropy_collapses_to_entropy_at_zero_variance() {
        let mut rng = Seed(1).rng();
        for _ in 0..200 {
            let inst = RandomInstance::draw(&mut rng);
            let zero = RegionSpec::new(vec![0.0; inst.head.dim()], inst.region.tau()).unwrap();
            let l_re = regional_entropy(&inst.z, &inst.head, &zero).unwrap();
            let p = inst.head.probabilities(&inst.z).unwrap();
            let h = entropy_loss(p.as_slice()).unwrap();
            assert!((l_re - h).abs() <= 1e-10, "{l_re} vs {h}");
            let l_ri = regional_instability(&inst.z, &inst.head, &zero).unwrap();
            assert!(l_ri.abs() <= 1e-12);
        }
    }

    #[test]
    fn regional_instability_single_class_is_zero() {
        assert_eq!(regional_instability_kernel(&[3.7], &[0.0], None), 0.0);
    }

    #[test]
    fn regional_instability_monotone_in_tau() {
        let mut rng = Seed(2).rng();
        for _ in 0..200 {
            let inst = RandomInstance::draw(&mut rng);
            let mut prev = 0.0;
            for tau in [0.1, 0.5, 1.0, 1.2, 2.5] {
                let r = inst.region.with_tau(tau).unwrap();
                let v = regional_instability(&inst.z, &inst.head, &r).unwrap();
                assert!(v + 1e-12 >= prev, "tau {tau}: {v} < {prev}");
                prev = v;
            }
        }
    }

    fn random_hyper(rng: &mut SeededRng) -> RecapHyper {
        RecapHyper::new(0.5, 0.5 + 2.0 * crate::numerics::uniform(rng), 0.2 + crate::numerics::uniform(rng)).unwrap()
    }

    #[test]
    fn objective_selection_and_weights() {
        let mut rng = Seed(3).rng();
        for _ in 0..50 {
            let inst = RandomInstance::draw(&mut rng);
            let d = inst.head.dim();
            let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..d).map(|_| standard_normal(&mut rng)).collect()).collect();
            let zs = Matrix::from_rows(&rows).unwrap();
            let hyper = random_hyper(&mut rng);
            let out = recap_objective(&zs, &inst.head, &inst.region, &hyper).unwrap();
            let mut acc = 0.0;
            for s in &out.samples {
                assert_eq!(s.selected, s.l_re < hyper.tau_re);
                assert!((s.weight - (hyper.l0 - s.l_re).exp()).abs() <= 1e-14 * s.weight);
                if s.selected {
                    acc += s.weight * (s.l_re + hyper.lambda * s.l_ri);
                }
            }
            assert_eq!(out.selected_count, out.samples.iter().filter(|s| s.selected).count());
            let expect = acc / out.selected_count.max(1) as f64;
            assert!((out.loss - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn objective_weight_anchor_and_empty_selection() {
        let hyper = RecapHyper::new(0.5, 1.0, 0.8).unwrap();
        assert_eq!(hyper.weight(0.8), 1.0);
        let head = head_2x2();
        let region = RegionSpec::new(vec![1.0, 1.0], 1.2).unwrap();
        let zs = Matrix::from_rows(&[[0.1, 0.2], [1.0, -1.0]]).unwrap();
        let none = RecapHyper::new(0.5, 0.0, 0.8).unwrap();
        let out = recap_objective(&zs, &head, &region, &none).unwrap();
        assert_eq!(out.selected_count, 0);
        assert_eq!(out.loss, 0.0);
        assert!(!out.has_selection());
        assert!(recap_objective(&Matrix::zeros(0, 2), &head, &region, &hyper).is_err());
    }

    #[test]
    fn default_hyper_for_ten_classes() {
        let h = RecapHyper::for_classes(10);
        let ln10 = 10f64.ln();
        assert!((h.l0 - 0.7 * ln10).abs() < 1e-15);
        assert!((h.tau_re - 0.8 * ln10).abs() < 1e-15);
        assert_eq!(h.lambda, 0.5);
    }

    #[test]
    fn gradient_zero_for_flat_head() {
        let flat = AffineHead::new(Matrix::zeros(4, 3), vec![0.5, -1.0, 0.0, 2.0]).unwrap();
        let region = RegionSpec::new(vec![1.0, 2.0, 0.5], 1.2).unwrap();
        let g = grad_z_objective(&[0.3, -0.2, 1.0], &flat, &region, 0.5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Seed(4).rng();
        for _ in 0..100 {
            let inst = RandomInstance::draw(&mut rng);
            let g = grad_z_objective(&inst.z, &inst.head, &inst.region, 0.5).unwrap();
            let proxy = RegionProxy::new(&inst.head, &inst.region).unwrap();
            let fd = central_diff_grad(
                |z| {
                    let t = proxy.terms(z).unwrap();
                    t.l_re + 0.5 * t.l_ri
                },
                &inst.z,
                1e-5,
            )
            .unwrap();
            let err = grad_rel_error(&g, &fd);
            assert!(err <= 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn gradient_reduces_to_entropy_gradient_at_zero_variance() {
        let mut rng = Seed(5).rng();
        for _ in 0..50 {
            let inst = RandomInstance::draw(&mut rng);
            let zero = RegionSpec::new(vec![0.0; inst.head.dim()], 1.0).unwrap();
            let g = grad_z_objective(&inst.z, &inst.head, &zero, 0.0).unwrap();
            // dH/dl_i = -p_i (ln p_i + H), then through Aᵀ
            let p = inst.head.probabilities(&inst.z).unwrap();
            let h = entropy_loss(p.as_slice()).unwrap();
            let dl: Vec<f64> = p.as_slice().iter().map(|&x| if x > 0.0 { -x * (x.ln() + h) } else { 0.0 }).collect();
            let expect = inst.head.weights().t_matvec(&dl);
            let err = grad_rel_error(&g, &expect);
            assert!(err < 1e-9, "rel err {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn proxies_nonnegative_and_bias_shift_invariant(seed in any::<u64>(), c in -100.0f64..100.0) {
            let mut rng = Seed(seed).rng();
            let inst = RandomInstance::draw(&mut rng);
            let shifted_bias: Vec<f64> = inst.head.bias().iter().map(|b| b + c).collect();
            let shifted = AffineHead::new(inst.head.weights().clone(), shifted_bias).unwrap();
            let a = RegionProxy::new(&inst.head, &inst.region).unwrap().terms(&inst.z).unwrap();
            let b = RegionProxy::new(&shifted, &inst.region).unwrap().terms(&inst.z).unwrap();
            prop_assert!(a.l_re >= 0.0 && a.l_ri >= 0.0);
            prop_assert!((a.l_re - b.l_re).abs() <= 1e-12, "{} vs {}", a.l_re, b.l_re);
            prop_assert!((a.l_ri - b.l_ri).abs() <= 1e-12);
        }
    }
}
