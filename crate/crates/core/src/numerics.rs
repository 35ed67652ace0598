//! Scalar and vector kernels shared by every other module.
//!
//! All arithmetic is `f64`. Randomness comes from ChaCha8 seeded with an
//! explicit 64-bit [`Seed`]; standard normals use the ziggurat sampler from
//! `rand_distr`. Seeds are split by hashing a tag into the parent seed, so
//! concurrent tasks each own an independent generator.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;

/// Tolerance on `Σ p_i = 1` accepted by [`ProbVector::new`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// The generator every sampler in the crate draws from.
pub type SeededRng = ChaCha8Rng;

/// Explicit 64-bit seed. Equal seeds give bit-identical sample streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> SeededRng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Child seed for an independent sub-task, keyed by `tag`.
    pub fn derive(self, tag: u64) -> Seed {
        Seed(splitmix64(self.0 ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }
}

impl From<u64> for Seed {
    fn from(value: u64) -> Self {
        Seed(value)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[inline]
pub fn standard_normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform draw on `[0, 1)`.
#[inline]
pub fn uniform(rng: &mut SeededRng) -> f64 {
    rand_distr::Standard.sample(rng)
}

/// Uniform integer in `lo..=hi`.
pub fn uniform_int(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    debug_assert!(lo <= hi);
    let span = (hi - lo + 1) as f64;
    let k = (uniform(rng) * span) as usize;
    lo + k.min(hi - lo)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Error::check_dim("matrix storage", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            Error::check_dim("matrix row", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `self · x` written into `out`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.iter_rows()) {
            *o = dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `selfᵀ · y`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &w) in self.iter_rows().zip(y) {
            if w != 0.0 {
                axpy(w, row, &mut out);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        l2_norm(&self.data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    math::sqrt(v.iter().map(|x| x * x).sum())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::invalid("probability entries must be finite and >= 0"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid("probability entries must sum to 1"));
        }
        Ok(ProbVector(p))
    }

    pub fn uniform(c: usize) -> Self {
        ProbVector(vec![1.0 / c as f64; c])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_logits(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid("empty input"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite input"));
    }
    Ok(())
}

/// `log Σ exp(v_i)` without validation. `v` must be non-empty; `-inf`
/// entries are allowed and contribute nothing.
#[inline]
pub(crate) fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = v.iter().map(|&x| math::exp(x - m)).sum();
    m + math::ln(s)
}

/// Numerically stable `log Σ exp(v_i)` (max-shifted).
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    check_logits(v)?;
    Ok(lse(v))
}

pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let l = lse(v);
    for (o, &x) in out.iter_mut().zip(v) {
        *o = math::exp(x - l);
    }
}

pub(crate) fn log_softmax_into(v: &[f64], out: &mut [f64]) {
    let l = lse(v);
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x - l;
    }
}

pub fn softmax(v: &[f64]) -> Result<ProbVector> {
    check_logits(v)?;
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(ProbVector(out))
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_logits(v)?;
    let mut out = vec![0.0; v.len()];
    log_softmax_into(v, &mut out);
    Ok(out)
}

/// Fills `out` with a draw from `N(mean, diag(std²))`.
#[inline]
pub(crate) fn draw_diag_gaussian(rng: &mut SeededRng, mean: &[f64], std: &[f64], out: &mut [f64]) {
    for ((o, &m), &s) in out.iter_mut().zip(mean).zip(std) {
        let e = standard_normal(rng);
        *o = if s == 0.0 { m } else { m + s * e };
    }
}

/// `n` i.i.d. rows from `N(mean, diag(diag_cov))`, deterministic in `seed`.
pub fn sample_diag_gaussian(seed: Seed, mean: &[f64], diag_cov: &[f64], n: usize) -> Result<Matrix> {
    Error::check_dim("diagonal covariance", mean.len(), diag_cov.len())?;
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    if diag_cov.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("variances must be finite and >= 0"));
    }
    let std: Vec<f64> = diag_cov.iter().map(|&v| math::sqrt(v)).collect();
    let mut rng = seed.rng();
    let mut out = Matrix::zeros(n, mean.len());
    for i in 0..n {
        draw_diag_gaussian(&mut rng, mean, &std, out.row_mut(i));
    }
    Ok(out)
}

/// Central finite differences `[f(x + h e_k) - f(x - h e_k)] / 2h`.
pub fn central_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let down = f(&probe);
        probe[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(alloc::format!("objective at coordinate {k}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_k |a_k - b_k| / (‖b‖₂ + 1e-8)`: the gradient-check error measure.
pub fn grad_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    diff / (l2_norm(reference) + 1e-8)
}
