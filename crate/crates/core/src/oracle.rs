//! Naive Monte-Carlo and brute-force estimators.
//!
//! Everything here samples features and pushes them through the plain
//! softmax classifier; nothing reuses the closed-form machinery in
//! [`crate::region`], so the two cannot share a bug.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{self, lse, standard_normal, uniform_int, Matrix, Seed, SeededRng};
use crate::region::{AffineHead, RegionSpec};

/// Sample mean with its standard error `s / √n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    /// Welford accumulation; a constant sample gives its value and zero
    /// stderr exactly.
    pub fn from_samples<I: IntoIterator<Item = f64>>(samples: I) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for x in samples {
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, found: n });
        }
        let var = (m2 / (n - 1) as f64).max(0.0);
        Ok(McEstimate {
            mean,
            stderr: math::sqrt(var / n as f64),
            n,
        })
    }

    /// `mean ≤ bound + k·stderr`
    pub fn within(&self, bound: f64, k: f64) -> bool {
        self.mean <= bound + k * self.stderr
    }
}

/// `Σ p_i ln(p_i / q_i)`; requires `q_i > 0` wherever `p_i > 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    Error::check_dim("kl operands", p.len(), q.len())?;
    numerics::ProbVector::new(p.to_vec())?;
    numerics::ProbVector::new(q.to_vec())?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::invalid("kl support violation: q_i = 0 where p_i > 0"));
            }
            acc += pi * math::ln(pi / qi);
        }
    }
    Ok(acc.max(0.0))
}

/// KL between two softmax distributions given by log-probabilities.
fn kl_from_logp(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&lp, &lq)| {
            let p = math::exp(lp);
            if p > 0.0 {
                p * (lp - lq)
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

fn log_probs(head: &AffineHead, z: &[f64], logits: &mut [f64], out: &mut [f64]) {
    head.logits_into(z, logits);
    let l = lse(logits);
    for (o, &x) in out.iter_mut().zip(logits.iter()) {
        *o = x - l;
    }
}

fn entropy_from_logp(logp: &[f64]) -> f64 {
    logp.iter()
        .map(|&lp| {
            let p = math::exp(lp);
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

fn check_inputs(z: &[f64], head: &AffineHead, region: &RegionSpec, n: usize) -> Result<()> {
    head.check_feature(z)?;
    Error::check_dim("region", head.dim(), region.dim())?;
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, found: n });
    }
    Ok(())
}

/// Draws `n` features from `N(z, τΣ)` and maps each through `f`.
fn mc_over_region<F>(seed: Seed, z: &[f64], head: &AffineHead, region: &RegionSpec, n: usize, mut f: F) -> Result<McEstimate>
where
    F: FnMut(&[f64]) -> f64,
{
    check_inputs(z, head, region, n)?;
    let std = region.effective_std();
    let mut rng = seed.rng();
    let mut zt = vec![0.0; z.len()];
    let mut logits = vec![0.0; head.classes()];
    let mut logp = vec![0.0; head.classes()];
    McEstimate::from_samples((0..n).map(|_| {
        numerics::draw_diag_gaussian(&mut rng, z, &std, &mut zt);
        log_probs(head, &zt, &mut logits, &mut logp);
        f(&logp)
    }))
}

/// MC estimate of `E_{z̃ ~ N(z, τΣ)} [H(softmax(A z̃ + b))]`.
pub fn mc_bias_term(seed: Seed, z: &[f64], head: &AffineHead, region: &RegionSpec, n: usize) -> Result<McEstimate> {
    mc_over_region(seed, z, head, region, n, entropy_from_logp)
}

/// MC estimate of `E_{z̃ ~ N(z, τΣ)} [KL(p(z) ‖ p(z̃))]`.
pub fn mc_variance_term(seed: Seed, z: &[f64], head: &AffineHead, region: &RegionSpec, n: usize) -> Result<McEstimate> {
    head.check_feature(z)?;
    let mut logits = vec![0.0; head.classes()];
    let mut center = vec![0.0; head.classes()];
    log_probs(head, z, &mut logits, &mut center);
    mc_over_region(seed, z, head, region, n, |logq| kl_from_logp(&center, logq))
}

/// Sampling counterpart of the closed-form batch terms: for each row of `zs`,
/// `n` head forwards over `N(z, τΣ)`, returning the batch sums of mean
/// entropy and mean `KL(p(z) ‖ p(z̃))`.
pub fn mc_batch_terms(rng: &mut SeededRng, zs: &Matrix, head: &AffineHead, region: &RegionSpec, n: usize) -> Result<(f64, f64)> {
    Error::check_dim("feature", head.dim(), zs.cols())?;
    Error::check_dim("region", head.dim(), region.dim())?;
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, found: 0 });
    }
    let std = region.effective_std();
    let mut zt = vec![0.0; zs.cols()];
    let mut logits = vec![0.0; head.classes()];
    let mut center = vec![0.0; head.classes()];
    let mut logq = vec![0.0; head.classes()];
    let (mut ent, mut kl) = (0.0, 0.0);
    for z in zs.iter_rows() {
        log_probs(head, z, &mut logits, &mut center);
        let (mut e, mut k) = (0.0, 0.0);
        for _ in 0..n {
            numerics::draw_diag_gaussian(rng, z, &std, &mut zt);
            log_probs(head, &zt, &mut logits, &mut logq);
            e += entropy_from_logp(&logq);
            k += kl_from_logp(&center, &logq);
        }
        ent += e / n as f64;
        kl += k / n as f64;
    }
    Ok((ent, kl))
}

/// Both sides of the finite-sample entropy inequality
/// `Σ_i H(p(z_i)) ≤ −Σ_c mean_k p(z_k)_c · Σ_j log p(z_j)_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sides {
    pub lhs: f64,
    pub rhs: f64,
}

pub fn lemma1_sides(features: &Matrix, head: &AffineHead) -> Result<Sides> {
    let n = features.rows();
    if n < 1 {
        return Err(Error::InsufficientData { needed: 1, found: 0 });
    }
    Error::check_dim("feature", head.dim(), features.cols())?;
    let c = head.classes();
    let mut logits = vec![0.0; c];
    let mut logp = vec![0.0; c];
    let mut mean_p = vec![0.0; c];
    let mut sum_logp = vec![0.0; c];
    let mut lhs = 0.0;
    for (k, z) in features.iter_rows().enumerate() {
        log_probs(head, z, &mut logits, &mut logp);
        lhs += entropy_from_logp(&logp);
        for cls in 0..c {
            // running mean keeps identical rows exact
            mean_p[cls] += (math::exp(logp[cls]) - mean_p[cls]) / (k + 1) as f64;
            sum_logp[cls] += logp[cls];
        }
    }
    let rhs = -mean_p.iter().zip(&sum_logp).map(|(m, s)| m * s).sum::<f64>();
    Ok(Sides { lhs, rhs })
}

/// MC side and closed side of the negative log-likelihood bound for class
/// `class` (0-based): `−E log p(z)_class ≤ log Σ_j exp[(a_j−a_i)·μ + (b_j−b_i) + ½(a_j−a_i)Σ'(a_j−a_i)ᵀ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSides {
    pub mc_lhs: McEstimate,
    pub closed_rhs: f64,
}

pub fn lemma2_sides(seed: Seed, mu: &[f64], head: &AffineHead, region: &RegionSpec, class: usize, n: usize) -> Result<NllSides> {
    if class >= head.classes() {
        return Err(Error::invalid("class index out of range"));
    }
    let mc_lhs = mc_over_region(seed, mu, head, region, n, |logp| -logp[class])?;
    let cov = region.effective_cov();
    let a = head.weights();
    let b = head.bias();
    let ai = a.row(class);
    let exps: Vec<f64> = (0..head.classes())
        .map(|j| {
            let aj = a.row(j);
            let mut lin = b[j] - b[class];
            let mut quad = 0.0;
            for k in 0..mu.len() {
                let diff = aj[k] - ai[k];
                lin += diff * mu[k];
                quad += diff * diff * cov[k];
            }
            lin + 0.5 * quad
        })
        .collect();
    Ok(NllSides {
        mc_lhs,
        closed_rhs: lse(&exps),
    })
}

/// A random (head, region, feature) triple for property checks:
/// `C ∈ {2..10}`, `d ∈ {2..16}`, `A, b, z ~ N(0,1)`, `σ² ~ |N(0,1)|`,
/// `τ ∈ {0.5, 1.2, 2.5}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomInstance {
    pub head: AffineHead,
    pub region: RegionSpec,
    pub z: Vec<f64>,
}

impl RandomInstance {
    pub const TAUS: [f64; 3] = [0.5, 1.2, 2.5];

    pub fn draw(rng: &mut SeededRng) -> Self {
        let c = uniform_int(rng, 2, 10);
        let d = uniform_int(rng, 2, 16);
        Self::draw_with_shape(rng, c, d)
    }

    pub fn draw_with_shape(rng: &mut SeededRng, c: usize, d: usize) -> Self {
        let weights: Vec<f64> = (0..c * d).map(|_| standard_normal(rng)).collect();
        let bias: Vec<f64> = (0..c).map(|_| standard_normal(rng)).collect();
        let z: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| standard_normal(rng).abs()).collect();
        let tau = Self::TAUS[uniform_int(rng, 0, 2)];
        RandomInstance {
            head: AffineHead::new(Matrix::from_vec(c, d, weights).expect("shape"), bias).expect("finite head"),
            region: RegionSpec::new(sigma, tau).expect("valid region"),
            z,
        }
    }

    pub fn with_zero_variance(&self) -> Self {
        RandomInstance {
            head: self.head.clone(),
            region: RegionSpec::new(vec![0.0; self.region.dim()], self.region.tau()).expect("valid region"),
            z: self.z.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{entropy_loss, regional_entropy, regional_instability};

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-15);
        // mpmath, 40 digits
        let v = kl_divergence(&[0.5, 0.3, 0.2], &[0.2, 0.5, 0.3]).unwrap();
        assert!((v - 0.223_804_657_185_647_45).abs() < 1e-15);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(kl_divergence(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn welford_constant_sample_is_exact() {
        let e = McEstimate::from_samples(core::iter::repeat_n(0.1, 20_000)).unwrap();
        assert_eq!(e.mean, 0.1);
        assert_eq!(e.stderr, 0.0);
        assert!(McEstimate::from_samples([1.0]).is_err());
    }

    #[test]
    fn mc_terms_degenerate_at_zero_variance() {
        let mut rng = Seed(9).rng();
        let inst = RandomInstance::draw(&mut rng).with_zero_variance();
        let bias = mc_bias_term(Seed(1), &inst.z, &inst.head, &inst.region, 100).unwrap();
        let p = inst.head.probabilities(&inst.z).unwrap();
        let h = entropy_loss(p.as_slice()).unwrap();
        assert!((bias.mean - h).abs() < 1e-14);
        assert_eq!(bias.stderr, 0.0);
        let var = mc_variance_term(Seed(1), &inst.z, &inst.head, &inst.region, 100).unwrap();
        assert_eq!(var.mean, 0.0);
        assert_eq!(var.stderr, 0.0);
    }

    #[test]
    fn mc_terms_are_seed_deterministic() {
        let mut rng = Seed(10).rng();
        let inst = RandomInstance::draw(&mut rng);
        let a = mc_bias_term(Seed(4), &inst.z, &inst.head, &inst.region, 500).unwrap();
        let b = mc_bias_term(Seed(4), &inst.z, &inst.head, &inst.region, 500).unwrap();
        assert_eq!(a, b);
        assert!(mc_bias_term(Seed(4), &inst.z, &inst.head, &inst.region, 1).is_err());
    }

    #[test]
    fn instability_dominates_mc_kl() {
        let mut rng = Seed(12).rng();
        for t in 0..20 {
            let inst = RandomInstance::draw(&mut rng);
            let mc = mc_variance_term(Seed(100 + t), &inst.z, &inst.head, &inst.region, 20_000).unwrap();
            let l_ri = regional_instability(&inst.z, &inst.head, &inst.region).unwrap();
            assert!(mc.within(l_ri, 3.0), "{:?} vs {l_ri}", mc);
        }
    }

    #[test]
    fn stderr_scales_as_inverse_sqrt_n() {
        let mut rng = Seed(13).rng();
        let inst = RandomInstance::draw_with_shape(&mut rng, 5, 8);
        let mut ratios = Vec::new();
        for t in 0..10 {
            let a = mc_variance_term(Seed(t), &inst.z, &inst.head, &inst.region, 4_000).unwrap();
            let b = mc_variance_term(Seed(1000 + t), &inst.z, &inst.head, &inst.region, 8_000).unwrap();
            ratios.push(b.stderr / a.stderr);
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let ideal = core::f64::consts::FRAC_1_SQRT_2;
        assert!((mean_ratio - ideal).abs() <= 0.3 * ideal, "ratio {mean_ratio}");
    }

    #[test]
    fn lemma1_edge_cases() {
        let mut rng = Seed(14).rng();
        let inst = RandomInstance::draw_with_shape(&mut rng, 10, 6);
        let one = Matrix::from_rows(core::slice::from_ref(&inst.z)).unwrap();
        let s = lemma1_sides(&one, &inst.head).unwrap();
        assert_eq!(s.lhs, s.rhs);
        let same = Matrix::from_rows(&vec![inst.z.clone(); 17]).unwrap();
        let s = lemma1_sides(&same, &inst.head).unwrap();
        assert!((s.lhs - s.rhs).abs() <= 1e-12 * s.lhs.abs().max(1.0));
        assert!(lemma1_sides(&Matrix::zeros(0, 6), &inst.head).is_err());
    }

    #[test]
    fn lemma1_holds_on_random_sets() {
        let mut rng = Seed(15).rng();
        for _ in 0..200 {
            let inst = RandomInstance::draw_with_shape(&mut rng, 10, 5);
            let n = uniform_int(&mut rng, 1, 64);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| 2.0 * standard_normal(&mut rng)).collect()).collect();
            let s = lemma1_sides(&Matrix::from_rows(&rows).unwrap(), &inst.head).unwrap();
            assert!(s.lhs <= s.rhs + 1e-9, "{s:?}");
        }
    }

    #[test]
    fn lemma2_edge_cases() {
        let mut rng = Seed(16).rng();
        let inst = RandomInstance::draw(&mut rng);
        let zero = inst.with_zero_variance();
        let s = lemma2_sides(Seed(1), &zero.z, &zero.head, &zero.region, 1, 50).unwrap();
        let p = zero.head.probabilities(&zero.z).unwrap();
        assert!((s.mc_lhs.mean + p.as_slice()[1].ln()).abs() < 1e-10);
        assert!((s.mc_lhs.mean - s.closed_rhs).abs() < 1e-10);

        let c = 4;
        let flat = AffineHead::new(Matrix::zeros(c, 3), vec![0.0; c]).unwrap();
        let region = RegionSpec::new(vec![1.0, 2.0, 3.0], 1.2).unwrap();
        let s = lemma2_sides(Seed(2), &[0.1, 0.2, 0.3], &flat, &region, 0, 10).unwrap();
        assert!((s.mc_lhs.mean - (c as f64).ln()).abs() < 1e-14);
        assert!((s.closed_rhs - (c as f64).ln()).abs() < 1e-14);
        assert!(lemma2_sides(Seed(2), &[0.1, 0.2, 0.3], &flat, &region, c, 10).is_err());
    }

    #[test]
    fn lemma2_holds_on_random_instances() {
        let mut rng = Seed(17).rng();
        for t in 0..20 {
            let inst = RandomInstance::draw(&mut rng);
            let class = uniform_int(&mut rng, 0, inst.head.classes() - 1);
            let s = lemma2_sides(Seed(t), &inst.z, &inst.head, &inst.region, class, 20_000).unwrap();
            assert!(s.mc_lhs.within(s.closed_rhs, 3.0), "{s:?}");
        }
    }

    #[test]
    fn augmented_probability_matches_ratio_of_expectations() {
        let mut rng = Seed(18).rng();
        for t in 0..5 {
            let inst = RandomInstance::draw_with_shape(&mut rng, 4, 3);
            // keep the exponentials light-tailed enough for a stable MC ratio
            let region = inst.region.with_tau(0.1).unwrap();
            let pbar = crate::region::augmented_probability(&inst.z, &inst.head, &region).unwrap();
            let n = 100_000;
            let samples = numerics::sample_diag_gaussian(Seed(50 + t), &inst.z, &region.effective_cov(), n).unwrap();
            let c = inst.head.classes();
            let mut num = vec![Vec::with_capacity(n); c];
            let mut den = Vec::with_capacity(n);
            for zt in samples.iter_rows() {
                let l = inst.head.logits(zt).unwrap();
                let e: Vec<f64> = l.iter().map(|x| x.exp()).collect();
                den.push(e.iter().sum::<f64>());
                for i in 0..c {
                    num[i].push(e[i]);
                }
            }
            let den_est = McEstimate::from_samples(den.iter().copied()).unwrap();
            for i in 0..c {
                let num_est = McEstimate::from_samples(num[i].iter().copied()).unwrap();
                let ratio = num_est.mean / den_est.mean;
                // delta-method standard error of the ratio of means
                let cov = num[i].iter().zip(&den).map(|(a, b)| (a - num_est.mean) * (b - den_est.mean)).sum::<f64>()
                    / (n as f64 - 1.0);
                let var_num = num_est.stderr.powi(2) * n as f64;
                let var_den = den_est.stderr.powi(2) * n as f64;
                let var_ratio = (var_num - 2.0 * ratio * cov + ratio * ratio * var_den) / (den_est.mean.powi(2) * n as f64);
                let se = var_ratio.max(0.0).sqrt();
                let got = pbar.as_slice()[i];
                assert!((ratio - got).abs() <= 3.0 * se + 1e-12, "class {i}: {ratio} vs {got} (se {se})");
            }
        }
    }

    #[test]
    fn regional_entropy_exceeds_center_entropy_typical() {
        // sanity: nonzero variance makes the proxy at least as large as the
        // center entropy on a symmetric two-class head at the boundary
        let head = AffineHead::new(Matrix::from_rows(&[[1.0], [-1.0]]).unwrap(), vec![0.0, 0.0]).unwrap();
        let region = RegionSpec::new(vec![1.0], 1.0).unwrap();
        let l_re = regional_entropy(&[0.0], &head, &region).unwrap();
        assert!(l_re >= 2f64.ln());
    }

    #[test]
    fn batch_terms_degenerate_and_agree_with_single() {
        let mut rng = Seed(21).rng();
        let inst = RandomInstance::draw(&mut rng);
        let zs = Matrix::from_rows(&[inst.z.clone(), inst.z.clone()]).unwrap();
        let zero = inst.with_zero_variance();
        let (e, k) = mc_batch_terms(&mut rng, &zs, &zero.head, &zero.region, 4).unwrap();
        let h = entropy_loss(inst.head.probabilities(&inst.z).unwrap().as_slice()).unwrap();
        assert!((e - 2.0 * h).abs() < 1e-12);
        assert!(k.abs() < 1e-12);

        let (e, k) = mc_batch_terms(&mut rng, &zs, &inst.head, &inst.region, 20_000).unwrap();
        let b = mc_bias_term(Seed(5), &inst.z, &inst.head, &inst.region, 20_000).unwrap();
        let v = mc_variance_term(Seed(5), &inst.z, &inst.head, &inst.region, 20_000).unwrap();
        assert!((e / 2.0 - b.mean).abs() < 6.0 * b.stderr + 1e-9);
        assert!((k / 2.0 - v.mean).abs() < 6.0 * v.stderr + 1e-9);
    }
}
