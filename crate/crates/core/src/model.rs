//! Desk-scale backbone: dense → tanh → dense → per-sample standardization
//! with a learnable affine (`γ`, `β`) → [`AffineHead`].
//!
//! Only `γ` and `β` move during test-time adaptation; pretraining updates
//! everything with cross-entropy and SGD with classical momentum
//! (`v ← μ v + g`, `θ ← θ − η v`, no Nesterov).

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::{self, axpy, standard_normal, Matrix, ProbVector, Seed};
use crate::region::AffineHead;

/// Variance floor inside the standardization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            input_dim: 32,
            hidden_dim: 64,
            feature_dim: 16,
            classes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyBackbone {
    w1: Matrix,
    c1: Vec<f64>,
    w2: Matrix,
    c2: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: Vec<f64>,
    /// `normalize(u)`: zero mean, unit variance across coordinates.
    pub normalized: Vec<f64>,
    pub inv_std: f64,
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: ProbVector,
}

impl TinyBackbone {
    pub fn from_parts(w1: Matrix, c1: Vec<f64>, w2: Matrix, c2: Vec<f64>, gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        Error::check_dim("c1", w1.rows(), c1.len())?;
        Error::check_dim("w2 columns", w1.rows(), w2.cols())?;
        Error::check_dim("c2", w2.rows(), c2.len())?;
        Error::check_dim("gamma", w2.rows(), gamma.len())?;
        Error::check_dim("beta", w2.rows(), beta.len())?;
        if w2.rows() < 2 {
            return Err(Error::invalid("feature dimension must be >= 2 for standardization"));
        }
        Ok(TinyBackbone {
            w1,
            c1,
            w2,
            c2,
            gamma,
            beta,
        })
    }

    /// Scaled Gaussian initialization (`1/fan_in` variance), `γ = 1`, `β = 0`.
    pub fn init(shape: ModelShape, seed: Seed) -> Result<(Self, AffineHead)> {
        let mut rng = seed.rng();
        let mut gauss = |rows: usize, cols: usize| {
            let scale = 1.0 / math::sqrt(cols as f64);
            let data = (0..rows * cols).map(|_| scale * standard_normal(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w1 = gauss(shape.hidden_dim, shape.input_dim)?;
        let w2 = gauss(shape.feature_dim, shape.hidden_dim)?;
        let a = gauss(shape.classes, shape.feature_dim)?;
        let d = shape.feature_dim;
        let backbone = TinyBackbone::from_parts(
            w1,
            vec![0.0; shape.hidden_dim],
            w2,
            vec![0.0; d],
            vec![1.0; d],
            vec![0.0; d],
        )?;
        let head = AffineHead::new(a, vec![0.0; shape.classes])?;
        Ok((backbone, head))
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn set_affine(&mut self, gamma: &[f64], beta: &[f64]) -> Result<()> {
        Error::check_dim("gamma", self.gamma.len(), gamma.len())?;
        Error::check_dim("beta", self.beta.len(), beta.len())?;
        self.gamma.copy_from_slice(gamma);
        self.beta.copy_from_slice(beta);
        Ok(())
    }

    /// Named tensors with their `(rows, cols)` shape, in a fixed order.
    pub fn tensors(&self) -> [(&'static str, (usize, usize), &[f64]); 6] {
        let (h, d_in, d) = (self.hidden_dim(), self.input_dim(), self.feature_dim());
        [
            ("w1", (h, d_in), self.w1.as_slice()),
            ("c1", (h, 1), &self.c1),
            ("w2", (d, h), self.w2.as_slice()),
            ("c2", (d, 1), &self.c2),
            ("gamma", (d, 1), &self.gamma),
            ("beta", (d, 1), &self.beta),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.c1,
            self.w2.as_mut_slice(),
            &mut self.c2,
            &mut self.gamma,
            &mut self.beta,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Largest L2 norm over the parameter tensors.
    pub fn max_param_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, _, t)| numerics::l2_norm(t))
            .fold(0.0, f64::max)
    }

    /// `x ↦ (h, normalize(u), z)` without the classifier.
    pub fn features(&self, x: &[f64]) -> Result<Forward> {
        Error::check_dim("input", self.input_dim(), x.len())?;
        let mut hidden = self.w1.matvec(x);
        for (h, c) in hidden.iter_mut().zip(&self.c1) {
            *h = math::tanh(*h + c);
        }
        let mut u = self.w2.matvec(&hidden);
        for (v, c) in u.iter_mut().zip(&self.c2) {
            *v += c;
        }
        let d = u.len() as f64;
        let mean = u.iter().sum::<f64>() / d;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv_std = 1.0 / math::sqrt(var + NORM_EPS);
        let normalized: Vec<f64> = u.iter().map(|v| (v - mean) * inv_std).collect();
        let z = normalized
            .iter()
            .zip(&self.gamma)
            .zip(&self.beta)
            .map(|((n, g), b)| g * n + b)
            .collect();
        Ok(Forward {
            hidden,
            normalized,
            inv_std,
            z,
            logits: Vec::new(),
            probs: ProbVector::uniform(1),
        })
    }
}

/// Full forward pass through backbone and head.
pub fn forward(x: &[f64], backbone: &TinyBackbone, head: &AffineHead) -> Result<Forward> {
    Error::check_dim("classifier input", head.dim(), backbone.feature_dim())?;
    let mut f = backbone.features(x)?;
    f.logits = head.logits(&f.z)?;
    f.probs = numerics::softmax(&f.logits)?;
    Ok(f)
}

/// Gradients of the normalization affine given `∂L/∂z`:
/// `∂L/∂γ = ∂L/∂z ⊙ normalize(u)`, `∂L/∂β = ∂L/∂z`.
pub fn backward_norm_affine(x: &[f64], backbone: &TinyBackbone, dl_dz: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    Error::check_dim("feature gradient", backbone.feature_dim(), dl_dz.len())?;
    if dl_dz.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature gradient".into()));
    }
    let f = backbone.features(x)?;
    let mut gg = vec![0.0; dl_dz.len()];
    let mut gb = vec![0.0; dl_dz.len()];
    accumulate_norm_affine(&f.normalized, dl_dz, &mut gg, &mut gb);
    Ok((gg, gb))
}

/// Adds one sample's affine gradients into the accumulators.
pub fn accumulate_norm_affine(normalized: &[f64], dl_dz: &[f64], grad_gamma: &mut [f64], grad_beta: &mut [f64]) {
    for k in 0..dl_dz.len() {
        grad_gamma[k] += dl_dz[k] * normalized[k];
        grad_beta[k] += dl_dz[k];
    }
}

/// Momentum buffers and step size for the adapted affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    pub velocity_gamma: Vec<f64>,
    pub velocity_beta: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
}

impl AdaptState {
    pub const DEFAULT_LR: f64 = 0.001;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(feature_dim: usize, lr: f64, momentum: f64) -> Self {
        AdaptState {
            velocity_gamma: vec![0.0; feature_dim],
            velocity_beta: vec![0.0; feature_dim],
            lr,
            momentum,
        }
    }

    /// One momentum step on `γ` and `β`.
    pub fn step(&mut self, backbone: &mut TinyBackbone, grad_gamma: &[f64], grad_beta: &[f64]) -> Result<()> {
        sgd_step(&mut backbone.gamma, grad_gamma, &mut self.velocity_gamma, self.lr, self.momentum)?;
        sgd_step(&mut backbone.beta, grad_beta, &mut self.velocity_beta, self.lr, self.momentum)
    }
}

/// `v ← momentum·v + g; θ ← θ − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    Error::check_dim("gradient", params.len(), grads.len())?;
    Error::check_dim("velocity", params.len(), velocity.len())?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Labeled inputs for pretraining and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Error::check_dim("labels", inputs.rows(), labels.len())?;
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::invalid("label out of range"));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: Seed,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: Seed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub backbone: TinyBackbone,
    pub head: AffineHead,
    /// Accuracy on the training data after the final epoch.
    pub source_accuracy: f64,
    pub final_loss: f64,
}

/// Gradient buffers for every trainable tensor (backbone then head).
struct FullGrads {
    backbone: [Vec<f64>; 6],
    a: Vec<f64>,
    b: Vec<f64>,
}

impl FullGrads {
    fn zeros(backbone: &TinyBackbone, head: &AffineHead) -> Self {
        let t = backbone.tensors();
        FullGrads {
            backbone: core::array::from_fn(|i| vec![0.0; t[i].2.len()]),
            a: vec![0.0; head.weights().as_slice().len()],
            b: vec![0.0; head.classes()],
        }
    }

    fn clear(&mut self) {
        for t in self.backbone.iter_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        self.a.iter_mut().for_each(|v| *v = 0.0);
        self.b.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Cross-entropy loss of one sample, accumulating its gradients.
fn accumulate_cross_entropy(x: &[f64], y: usize, backbone: &TinyBackbone, head: &AffineHead, grads: &mut FullGrads) -> Result<f64> {
    let f = forward(x, backbone, head)?;
    let p = f.probs.as_slice();
    let loss = -math::ln(p[y].max(f64::MIN_POSITIVE));
    let mut dlogits = p.to_vec();
    dlogits[y] -= 1.0;

    let d = backbone.feature_dim();
    for (cls, &g) in dlogits.iter().enumerate() {
        axpy(g, &f.z, &mut grads.a[cls * d..(cls + 1) * d]);
        grads.b[cls] += g;
    }
    let dz = head.weights().t_matvec(&dlogits);

    let [gw1, gc1, gw2, gc2, ggamma, gbeta] = &mut grads.backbone;
    accumulate_norm_affine(&f.normalized, &dz, ggamma, gbeta);
    let dn: Vec<f64> = dz.iter().zip(&backbone.gamma).map(|(a, b)| a * b).collect();
    let mean_dn = dn.iter().sum::<f64>() / d as f64;
    let mean_dn_n = dn.iter().zip(&f.normalized).map(|(a, b)| a * b).sum::<f64>() / d as f64;
    let du: Vec<f64> = dn
        .iter()
        .zip(&f.normalized)
        .map(|(g, n)| f.inv_std * (g - mean_dn - n * mean_dn_n))
        .collect();
    let h = backbone.hidden_dim();
    for (k, &g) in du.iter().enumerate() {
        axpy(g, &f.hidden, &mut gw2[k * h..(k + 1) * h]);
        gc2[k] += g;
    }
    let dh = backbone.w2.t_matvec(&du);
    let d_in = backbone.input_dim();
    for (j, (&g, &hv)) in dh.iter().zip(&f.hidden).enumerate() {
        let dpre = g * (1.0 - hv * hv);
        axpy(dpre, x, &mut gw1[j * d_in..(j + 1) * d_in]);
        gc1[j] += dpre;
    }
    Ok(loss)
}

pub fn accuracy(data: &Dataset, backbone: &TinyBackbone, head: &AffineHead) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter_rows().zip(&data.labels) {
        if forward(x, backbone, head)?.probs.argmax() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains every parameter with minibatch cross-entropy; deterministic in
/// `opts.seed`.
pub fn pretrain_source(data: &Dataset, shape: ModelShape, opts: PretrainOptions) -> Result<Pretrained> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be >= 1"));
    }
    Error::check_dim("input", shape.input_dim, data.inputs.cols())?;
    Error::check_dim("classes", shape.classes, data.classes)?;
    let (mut backbone, mut head) = TinyBackbone::init(shape, opts.seed.derive(0))?;
    let mut grads = FullGrads::zeros(&backbone, &head);
    let mut vel = FullGrads::zeros(&backbone, &head);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = opts.seed.derive(1).rng();
    let mut final_loss = 0.0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            grads.clear();
            for &i in chunk {
                epoch_loss += accumulate_cross_entropy(data.inputs.row(i), data.labels[i], &backbone, &head, &mut grads)?;
            }
            let scale = 1.0 / chunk.len() as f64;
            for (t, (g, v)) in backbone
                .tensors_mut()
                .into_iter()
                .zip(grads.backbone.iter_mut().zip(vel.backbone.iter_mut()))
            {
                g.iter_mut().for_each(|x| *x *= scale);
                sgd_step(t, g, v, opts.lr, opts.momentum)?;
            }
            grads.a.iter_mut().for_each(|x| *x *= scale);
            grads.b.iter_mut().for_each(|x| *x *= scale);
            sgd_step(head.weights_mut().as_mut_slice(), &grads.a, &mut vel.a, opts.lr, opts.momentum)?;
            sgd_step(head.bias_mut(), &grads.b, &mut vel.b, opts.lr, opts.momentum)?;
        }
        final_loss = epoch_loss / data.len() as f64;
        if !final_loss.is_finite() || !backbone.all_finite() {
            return Err(Error::NonFinite("pretraining diverged".into()));
        }
    }
    let source_accuracy = accuracy(data, &backbone, &head)?;
    Ok(Pretrained {
        backbone,
        head,
        source_accuracy,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_diff_grad, grad_rel_error, uniform};
    use crate::region::{recap_objective, recap_objective_with_grad, RecapHyper, RegionSpec};

    fn hand_network() -> (TinyBackbone, AffineHead) {
        let w1 = Matrix::from_rows(&[[0.5, -1.0], [1.0, 0.25], [-0.5, 0.5]]).unwrap();
        let w2 = Matrix::from_rows(&[[1.0, 0.0, -1.0], [0.5, 0.5, 0.5], [0.0, -2.0, 1.0]]).unwrap();
        let bb = TinyBackbone::from_parts(w1, vec![0.1, 0.0, -0.1], w2, vec![0.0, 0.2, -0.2], vec![1.5, 0.5, 1.0], vec![0.1, -0.1, 0.0])
            .unwrap();
        let head = AffineHead::new(Matrix::from_rows(&[[1.0, 0.0, 0.5], [-1.0, 1.0, 0.0]]).unwrap(), vec![0.0, 0.3]).unwrap();
        (bb, head)
    }

    fn random_network(seed: u64, shape: ModelShape) -> (TinyBackbone, AffineHead) {
        let (mut bb, head) = TinyBackbone::init(shape, Seed(seed)).unwrap();
        let mut rng = Seed(seed).derive(9).rng();
        let d = shape.feature_dim;
        let g: Vec<f64> = (0..d).map(|_| 0.5 + uniform(&mut rng)).collect();
        let b: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng) * 0.3).collect();
        bb.set_affine(&g, &b).unwrap();
        (bb, head)
    }

    #[test]
    fn forward_matches_hand_computation() {
        let (bb, head) = hand_network();
        let f = forward(&[1.0, 0.0], &bb, &head).unwrap();
        // step-by-step with x = e_1
        let h = [(0.5f64 + 0.1).tanh(), 1.0f64.tanh(), (-0.5f64 - 0.1).tanh()];
        let u = [h[0] - h[2], 0.5 * (h[0] + h[1] + h[2]) + 0.2, -2.0 * h[1] + h[2] - 0.2];
        let mean = (u[0] + u[1] + u[2]) / 3.0;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        let s = (var + 1e-5).sqrt();
        let n: Vec<f64> = u.iter().map(|v| (v - mean) / s).collect();
        let z = [1.5 * n[0] + 0.1, 0.5 * n[1] - 0.1, n[2]];
        let l = [z[0] + 0.5 * z[2], -z[0] + z[1] + 0.3];
        let m = l[0].max(l[1]);
        let den = (l[0] - m).exp() + (l[1] - m).exp();
        let p = [(l[0] - m).exp() / den, (l[1] - m).exp() / den];
        for k in 0..3 {
            assert!((f.z[k] - z[k]).abs() < 1e-14);
        }
        for k in 0..2 {
            assert!((f.probs.as_slice()[k] - p[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_affine_gives_standardized_features() {
        let (bb, _) = TinyBackbone::init(ModelShape::default(), Seed(1)).unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = bb.features(&x).unwrap();
        assert_eq!(f.z, f.normalized);
        let mean = f.z.iter().sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn constant_gamma_recovers_zero_mean() {
        let (mut bb, _) = TinyBackbone::init(ModelShape::default(), Seed(2)).unwrap();
        bb.set_affine(&[2.5; 16], &(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let x = vec![0.3; 32];
        let f = bb.features(&x).unwrap();
        let m = f.z.iter().zip(bb.beta()).map(|(z, b)| (z - b) / 2.5).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-9);
    }

    #[test]
    fn dimension_errors() {
        let (bb, head) = hand_network();
        assert!(forward(&[1.0], &bb, &head).is_err());
        assert!(backward_norm_affine(&[1.0, 0.0], &bb, &[0.0]).is_err());
        assert!(backward_norm_affine(&[1.0, 0.0], &bb, &[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn affine_backward_zero_and_product_structure() {
        let (bb, _) = hand_network();
        let (gg, gb) = backward_norm_affine(&[0.2, -0.4], &bb, &[0.0; 3]).unwrap();
        assert!(gg.iter().chain(&gb).all(|&v| v == 0.0));
        let f = bb.features(&[0.2, -0.4]).unwrap();
        let (gg, gb) = backward_norm_affine(&[0.2, -0.4], &bb, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(gb, vec![1.0, -2.0, 0.5]);
        for k in 0..3 {
            assert_eq!(gg[k], gb[k] * f.normalized[k]);
        }
    }

    /// Batch objective with α and selection frozen at their base values.
    fn frozen_objective(bb: &TinyBackbone, head: &AffineHead, region: &RegionSpec, hyper: &RecapHyper, xs: &Matrix, frozen: &[(bool, f64)]) -> f64 {
        let rows: Vec<Vec<f64>> = xs.iter_rows().map(|x| bb.features(x).unwrap().z).collect();
        let zs = Matrix::from_rows(&rows).unwrap();
        let out = recap_objective(&zs, head, region, hyper).unwrap();
        let n_sel = frozen.iter().filter(|s| s.0).count().max(1) as f64;
        out.samples
            .iter()
            .zip(frozen)
            .filter(|(_, f)| f.0)
            .map(|(s, f)| f.1 * (s.l_re + hyper.lambda * s.l_ri))
            .sum::<f64>()
            / n_sel
    }

    #[test]
    fn end_to_end_affine_gradient_matches_finite_differences() {
        let shape = ModelShape {
            input_dim: 6,
            hidden_dim: 8,
            feature_dim: 5,
            classes: 4,
        };
        for cfg in 0..10u64 {
            let (bb, head) = random_network(cfg, shape);
            let mut rng = Seed(cfg).derive(3).rng();
            let xs = Matrix::from_vec(4, 6, (0..24).map(|_| standard_normal(&mut rng)).collect()).unwrap();
            let region = RegionSpec::new((0..5).map(|_| standard_normal(&mut rng).abs()).collect(), 1.2).unwrap();
            let hyper = RecapHyper::new(0.5, 10.0, 0.7 * 4f64.ln()).unwrap();

            let rows: Vec<Vec<f64>> = xs.iter_rows().map(|x| bb.features(x).unwrap().z).collect();
            let zs = Matrix::from_rows(&rows).unwrap();
            let (out, gz) = recap_objective_with_grad(&zs, &head, &region, &hyper).unwrap();
            let frozen: Vec<(bool, f64)> = out.samples.iter().map(|s| (s.selected, s.weight)).collect();
            let mut gg = vec![0.0; 5];
            let mut gb = vec![0.0; 5];
            for (x, g) in xs.iter_rows().zip(gz.iter_rows()) {
                let (a, b) = backward_norm_affine(x, &bb, g).unwrap();
                axpy(1.0, &a, &mut gg);
                axpy(1.0, &b, &mut gb);
            }
            let mut analytic = gg.clone();
            analytic.extend_from_slice(&gb);
            let theta: Vec<f64> = bb.gamma().iter().chain(bb.beta()).copied().collect();
            let fd = central_diff_grad(
                |t| {
                    let mut probe = bb.clone();
                    probe.set_affine(&t[..5], &t[5..]).unwrap();
                    frozen_objective(&probe, &head, &region, &hyper, &xs, &frozen)
                },
                &theta,
                1e-5,
            )
            .unwrap();
            let err = grad_rel_error(&analytic, &fd);
            assert!(err <= 1e-5, "config {cfg}: rel err {err}");
        }
    }

    #[test]
    fn cross_entropy_backward_matches_finite_differences() {
        let shape = ModelShape {
            input_dim: 5,
            hidden_dim: 6,
            feature_dim: 4,
            classes: 3,
        };
        let (bb, head) = random_network(7, shape);
        let x = [0.3, -0.8, 1.1, 0.05, -0.4];
        let y = 2;
        let mut grads = FullGrads::zeros(&bb, &head);
        accumulate_cross_entropy(&x, y, &bb, &head, &mut grads).unwrap();
        let loss = |bb: &TinyBackbone| -forward(&x, bb, &head).unwrap().probs.as_slice()[y].ln();
        for (idx, g) in grads.backbone.iter().enumerate() {
            let base: Vec<f64> = bb.tensors()[idx].2.to_vec();
            let fd = central_diff_grad(
                |t| {
                    let mut probe = bb.clone();
                    probe.tensors_mut()[idx].copy_from_slice(t);
                    loss(&probe)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = grad_rel_error(g, &fd);
            assert!(err < 1e-6, "tensor {idx}: {err}");
        }
    }

    #[test]
    fn sgd_step_conventions() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[2.0], &mut v, 0.1, 0.0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);

        // two steps with constant g: displacement lr·g·(2 + μ)
        let (lr, mu, g) = (0.05, 0.9, 1.7);
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g], &mut v, lr, mu).unwrap();
        sgd_step(&mut p, &[g], &mut v, lr, mu).unwrap();
        assert!((p[0] + lr * g * (2.0 + mu)).abs() < 1e-15);

        assert!(sgd_step(&mut [0.0], &[1.0, 2.0], &mut [0.0], 0.1, 0.9).is_err());
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = Seed(seed).rng();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let center = if y == 0 { 2.0 } else { -2.0 };
            rows.push(vec![center + 0.5 * standard_normal(&mut rng), 0.5 * standard_normal(&mut rng), center + 0.5 * standard_normal(&mut rng)]);
            labels.push(y);
        }
        Dataset::new(Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn pretrain_separable_blobs_and_determinism() {
        let data = blobs(400, 3);
        let shape = ModelShape {
            input_dim: 3,
            hidden_dim: 8,
            feature_dim: 4,
            classes: 2,
        };
        let opts = PretrainOptions {
            epochs: 20,
            seed: Seed(5),
            ..Default::default()
        };
        let a = pretrain_source(&data, shape, opts).unwrap();
        assert!(a.source_accuracy >= 0.99, "accuracy {}", a.source_accuracy);
        let b = pretrain_source(&data, shape, opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pretrain_rejects_empty() {
        let empty = Dataset::new(Matrix::zeros(0, 3), vec![], 2).unwrap();
        let shape = ModelShape {
            input_dim: 3,
            hidden_dim: 4,
            feature_dim: 2,
            classes: 2,
        };
        assert!(pretrain_source(&empty, shape, PretrainOptions::default()).is_err());
    }
}
