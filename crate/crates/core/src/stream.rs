//! Synthetic source task, vector corruptions and wild test streams.
//!
//! Corruption severity table (`s ∈ 1..=5`):
//!
//! | kind        | transform                                                    |
//! |-------------|--------------------------------------------------------------|
//! | `rotate`    | rotation by `9°·s` in a random 2-plane fixed by the seed     |
//! | `add_noise` | `x + ε`, `ε ~ N(0, (0.1·s)² I)`, fresh per sample            |
//! | `scale`     | `x_k · exp(0.1·s·g_k)`, `g_k ~ N(0,1)` fixed by the seed      |
//! | `occlude`   | zero the first `round(0.1·s·D)` coordinates of a seeded permutation |
//!
//! Seeded parameters are shared across severities, so displacement grows
//! monotonically with `s` for every kind.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math;
use crate::model::Dataset;
use crate::numerics::{self, standard_normal, uniform, Matrix, Seed, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    prototypes: Matrix,
    noise: f64,
    seed: Seed,
}

impl SyntheticTask {
    pub const DEFAULT_NOISE: f64 = 1.5;

    /// Prototype coordinates are i.i.d. `N(0, 1)`.
    pub fn new(classes: usize, input_dim: usize, noise: f64, seed: Seed) -> Result<Self> {
        if classes < 2 || input_dim < 2 {
            return Err(Error::invalid("task needs >= 2 classes and input dim >= 2"));
        }
        if !(noise >= 0.0) {
            return Err(Error::invalid("noise scale must be >= 0"));
        }
        let mut rng = seed.derive(0x70).rng();
        let data = (0..classes * input_dim).map(|_| standard_normal(&mut rng)).collect();
        let prototypes = Matrix::from_vec(classes, input_dim, data)?;
        Ok(SyntheticTask { prototypes, noise, seed })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn seed(&self) -> Seed {
        self.seed
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    /// `prototype_y + noise · N(0, I)` written into `out`.
    pub fn sample_into(&self, y: usize, rng: &mut SeededRng, out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(self.prototypes.row(y)) {
            let e = standard_normal(rng);
            *o = p + self.noise * e;
        }
    }
}

/// `n` clean labeled samples, labels `i mod C` (balanced up to rounding).
pub fn gen_source_dataset(task: &SyntheticTask, n: usize) -> Result<Dataset> {
    let c = task.classes();
    if n < c {
        return Err(Error::invalid("source dataset needs at least one sample per class"));
    }
    let mut rng = task.seed.derive(0x5e).rng();
    let mut inputs = Matrix::zeros(n, task.input_dim());
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    for (i, &y) in labels.iter().enumerate() {
        task.sample_into(y, &mut rng, inputs.row_mut(i));
    }
    Dataset::new(inputs, labels, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    Rotate,
    AddNoise,
    Scale,
    Occlude,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::Rotate,
        CorruptionKind::AddNoise,
        CorruptionKind::Scale,
        CorruptionKind::Occlude,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Rotate => "rotate",
            CorruptionKind::AddNoise => "add_noise",
            CorruptionKind::Scale => "scale",
            CorruptionKind::Occlude => "occlude",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown corruption kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Transform {
    Rotate { u: Vec<f64>, v: Vec<f64>, cos: f64, sin: f64 },
    Noise { std: f64 },
    Scale { gains: Vec<f64> },
    Occlude { mask: Vec<bool> },
}

/// A corruption instantiated for one input dimension and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Corruption {
    kind: CorruptionKind,
    severity: u8,
    transform: Transform,
}

fn random_unit(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let n = numerics::l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8, dim: usize, seed: Seed) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid("severity must be in 1..=5"));
        }
        if dim < 2 {
            return Err(Error::invalid("corruptions need input dim >= 2"));
        }
        let s = severity as f64;
        let mut rng = seed.derive(kind as u64).rng();
        let transform = match kind {
            CorruptionKind::Rotate => {
                let u = random_unit(&mut rng, dim);
                let mut v = random_unit(&mut rng, dim);
                let proj = numerics::dot(&u, &v);
                numerics::axpy(-proj, &u, &mut v);
                let n = numerics::l2_norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
                let theta = (9.0 * s).to_radians();
                Transform::Rotate {
                    u,
                    v,
                    cos: math::cos(theta),
                    sin: math::sin(theta),
                }
            }
            CorruptionKind::AddNoise => Transform::Noise { std: 0.1 * s },
            CorruptionKind::Scale => Transform::Scale {
                gains: (0..dim).map(|_| math::exp(0.1 * s * standard_normal(&mut rng))).collect(),
            },
            CorruptionKind::Occlude => {
                let mut perm: Vec<usize> = (0..dim).collect();
                perm.shuffle(&mut rng);
                let count = ((0.1 * s * dim as f64) + 0.5) as usize;
                let mut mask = vec![false; dim];
                for &k in perm.iter().take(count) {
                    mask[k] = true;
                }
                Transform::Occlude { mask }
            }
        };
        Ok(Corruption {
            kind,
            severity,
            transform,
        })
    }

    pub fn kind(&self) -> CorruptionKind {
        self.kind
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    /// Applies the transform in place; `rng` feeds the per-sample noise.
    pub fn apply(&self, x: &mut [f64], rng: &mut SeededRng) {
        match &self.transform {
            Transform::Rotate { u, v, cos, sin } => {
                let a = numerics::dot(x, u);
                let b = numerics::dot(x, v);
                // in-plane coordinates (a, b) → (a cos − b sin, a sin + b cos)
                let da = a * cos - b * sin - a;
                let db = a * sin + b * cos - b;
                numerics::axpy(da, u, x);
                numerics::axpy(db, v, x);
            }
            Transform::Noise { std } => {
                for xi in x.iter_mut() {
                    *xi += std * standard_normal(rng);
                }
            }
            Transform::Scale { gains } => {
                for (xi, g) in x.iter_mut().zip(gains) {
                    *xi *= g;
                }
            }
            Transform::Occlude { mask } => {
                for (xi, &m) in x.iter_mut().zip(mask) {
                    if m {
                        *xi = 0.0;
                    }
                }
            }
        }
    }
}

/// One-shot corruption of a single input.
pub fn corrupt(x: &[f64], kind: CorruptionKind, severity: u8, seed: Seed) -> Result<Vec<f64>> {
    let c = Corruption::new(kind, severity, x.len(), seed)?;
    let mut out = x.to_vec();
    c.apply(&mut out, &mut seed.derive(0xa11).rng());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelSchedule {
    Iid,
    /// Segmented imbalance; `f64::INFINITY` gives a class-sorted stream.
    Imbalanced(f64),
}

impl LabelSchedule {
    /// Probability of the segment's own class.
    pub fn dominant_probability(&self, classes: usize) -> f64 {
        match *self {
            LabelSchedule::Iid => 1.0 / classes as f64,
            LabelSchedule::Imbalanced(rho) if rho.is_infinite() => 1.0,
            LabelSchedule::Imbalanced(rho) => rho / (rho + classes as f64 - 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamScenario {
    pub name: String,
    pub batch_size: usize,
    /// Total samples `T`; a trailing partial batch is dropped.
    pub length: usize,
    pub domains: Vec<DomainSpec>,
    pub labels: LabelSchedule,
    pub seed: Seed,
}

impl StreamScenario {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.length < self.batch_size {
            return Err(Error::invalid("stream shorter than one batch"));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("scenario needs at least one domain"));
        }
        if self.domains.iter().any(|d| !(d.weight >= 0.0) || !d.weight.is_finite()) {
            return Err(Error::invalid("domain weights must be finite and >= 0"));
        }
        let total: f64 = self.domains.iter().map(|d| d.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("domain weights must sum to 1"));
        }
        if self.domains.iter().any(|d| !(1..=5).contains(&d.severity)) {
            return Err(Error::invalid("severity must be in 1..=5"));
        }
        if let LabelSchedule::Imbalanced(rho) = self.labels {
            if !(rho >= 1.0) {
                return Err(Error::invalid("imbalance ratio must be >= 1"));
            }
        }
        Ok(())
    }

    /// B = 1, one domain at severity 5, i.i.d. labels.
    pub fn single_domain(kind: CorruptionKind, length: usize, seed: Seed) -> Self {
        StreamScenario {
            name: alloc::format!("bs1_{}", kind.name()),
            batch_size: 1,
            length,
            domains: vec![DomainSpec {
                kind,
                severity: 5,
                weight: 1.0,
            }],
            labels: LabelSchedule::Iid,
            seed,
        }
    }

    /// B = 64, uniform mixture of every kind at severities 5 and 4.
    pub fn mixed_domains(length: usize, seed: Seed) -> Self {
        let mut domains = Vec::new();
        for kind in CorruptionKind::ALL {
            for severity in [5, 4] {
                domains.push(DomainSpec {
                    kind,
                    severity,
                    weight: 1.0 / 8.0,
                });
            }
        }
        StreamScenario {
            name: "mixed".into(),
            batch_size: 64,
            length,
            domains,
            labels: LabelSchedule::Iid,
            seed,
        }
    }

    /// B = 64, class-sorted labels (ρ = ∞), every kind at severity 5.
    pub fn label_shift(length: usize, seed: Seed) -> Self {
        StreamScenario {
            name: "label_shift".into(),
            batch_size: 64,
            length,
            domains: CorruptionKind::ALL
                .into_iter()
                .map(|kind| DomainSpec {
                    kind,
                    severity: 5,
                    weight: 0.25,
                })
                .collect(),
            labels: LabelSchedule::Imbalanced(f64::INFINITY),
            seed,
        }
    }
}

/// One batch of the stream. Labels are ground truth for metrics only.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    labels: Vec<usize>,
    domains: Vec<usize>,
}

impl Batch {
    /// The only view adaptation methods receive.
    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn draw_categorical(rng: &mut SeededRng, weights: &[f64]) -> usize {
    let u = uniform(rng);
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last index with positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Label at position `t` of a stream of length `length`.
fn draw_label(rng: &mut SeededRng, schedule: LabelSchedule, t: usize, length: usize, classes: usize) -> usize {
    match schedule {
        LabelSchedule::Iid => numerics::uniform_int(rng, 0, classes - 1),
        LabelSchedule::Imbalanced(_) => {
            let segment_len = (length / classes).max(1);
            let seg = (t / segment_len).min(classes - 1);
            let p = schedule.dominant_probability(classes);
            if p >= 1.0 || uniform(rng) < p {
                seg
            } else {
                let other = numerics::uniform_int(rng, 0, classes - 2);
                if other >= seg {
                    other + 1
                } else {
                    other
                }
            }
        }
    }
}

/// Materializes the scenario as consecutive batches.
pub fn build_stream(task: &SyntheticTask, scenario: &StreamScenario) -> Result<Vec<Batch>> {
    scenario.validate()?;
    let d = task.input_dim();
    let c = task.classes();
    let corruptions = scenario
        .domains
        .iter()
        .enumerate()
        .map(|(i, spec)| Corruption::new(spec.kind, spec.severity, d, scenario.seed.derive(0xc0 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = scenario.domains.iter().map(|s| s.weight).collect();

    let mut label_rng = scenario.seed.derive(1).rng();
    let mut domain_rng = scenario.seed.derive(2).rng();
    let mut input_rng = scenario.seed.derive(3).rng();
    let mut noise_rng = scenario.seed.derive(4).rng();

    let n_batches = scenario.length / scenario.batch_size;
    let used = n_batches * scenario.batch_size;
    let mut batches = Vec::with_capacity(n_batches);
    let mut t = 0;
    for _ in 0..n_batches {
        let b = scenario.batch_size;
        let mut inputs = Matrix::zeros(b, d);
        let mut labels = Vec::with_capacity(b);
        let mut domains = Vec::with_capacity(b);
        for row in 0..b {
            let y = draw_label(&mut label_rng, scenario.labels, t, used, c);
            let dom = draw_categorical(&mut domain_rng, &weights);
            let x = inputs.row_mut(row);
            task.sample_into(y, &mut input_rng, x);
            corruptions[dom].apply(x, &mut noise_rng);
            labels.push(y);
            domains.push(dom);
            t += 1;
        }
        batches.push(Batch { inputs, labels, domains });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask::new(10, 32, 1.0, Seed(1)).unwrap()
    }

    #[test]
    fn zero_noise_samples_are_prototypes() {
        let t = SyntheticTask::new(4, 8, 0.0, Seed(2)).unwrap();
        let data = gen_source_dataset(&t, 20).unwrap();
        for (x, &y) in data.inputs.iter_rows().zip(&data.labels) {
            assert_eq!(x, t.prototypes().row(y));
        }
    }

    #[test]
    fn source_dataset_is_balanced_and_seeded() {
        let data = gen_source_dataset(&task(), 1000).unwrap();
        for c in 0..10 {
            assert_eq!(data.labels.iter().filter(|&&y| y == c).count(), 100);
        }
        assert_eq!(data, gen_source_dataset(&task(), 1000).unwrap());
        let other = gen_source_dataset(&SyntheticTask::new(10, 32, 1.0, Seed(2)).unwrap(), 1000).unwrap();
        assert_ne!(data, other);
        assert!(gen_source_dataset(&task(), 9).is_err());
    }

    #[test]
    fn prototypes_distinct() {
        let t = task();
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert_ne!(t.prototypes().row(i), t.prototypes().row(j));
            }
        }
    }

    #[test]
    fn corruption_kind_parse() {
        assert_eq!("occlude".parse::<CorruptionKind>().unwrap(), CorruptionKind::Occlude);
        assert!("blur".parse::<CorruptionKind>().is_err());
        assert!(corrupt(&[1.0, 2.0], CorruptionKind::Scale, 0, Seed(1)).is_err());
        assert!(corrupt(&[1.0, 2.0], CorruptionKind::Scale, 6, Seed(1)).is_err());
    }

    #[test]
    fn rotation_preserves_norm_and_angle() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        for s in 1..=5u8 {
            let c = Corruption::new(CorruptionKind::Rotate, s, 16, Seed(3)).unwrap();
            let mut y = x.clone();
            c.apply(&mut y, &mut Seed(0).rng());
            let nx = numerics::l2_norm(&x);
            assert!((numerics::l2_norm(&y) - nx).abs() < 1e-12);
            if let Transform::Rotate { u, v, .. } = &c.transform {
                assert!(numerics::dot(u, v).abs() < 1e-12);
                // angle between in-plane projections is 9°·s
                let (a, b) = (numerics::dot(&x, u), numerics::dot(&x, v));
                let (a2, b2) = (numerics::dot(&y, u), numerics::dot(&y, v));
                let ang = (a * b2 - b * a2).atan2(a * a2 + b * b2);
                assert!((ang - (9.0 * s as f64).to_radians()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn noise_table() {
        // variance of the added noise is (0.1 s)²
        let x = vec![0.0; 4];
        let c = Corruption::new(CorruptionKind::AddNoise, 3, 4, Seed(1)).unwrap();
        let mut rng = Seed(9).rng();
        let n = 20_000;
        let mut ss = 0.0;
        for _ in 0..n {
            let mut y = x.clone();
            c.apply(&mut y, &mut rng);
            ss += y.iter().map(|v| v * v).sum::<f64>();
        }
        let var = ss / (4 * n) as f64;
        assert!((var - 0.09).abs() < 0.09 * 0.03, "var {var}");
    }

    #[test]
    fn displacement_monotone_in_severity() {
        let t = task();
        let data = gen_source_dataset(&t, 1000).unwrap();
        for kind in CorruptionKind::ALL {
            let mut prev = 0.0;
            for s in 1..=5u8 {
                let c = Corruption::new(kind, s, 32, Seed(5)).unwrap();
                let mut rng = Seed(6).rng();
                let mut total = 0.0;
                for x in data.inputs.iter_rows() {
                    let mut y = x.to_vec();
                    c.apply(&mut y, &mut rng);
                    let diff: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
                    total += numerics::l2_norm(&diff);
                }
                let mean = total / 1000.0;
                assert!(mean > prev, "{kind} severity {s}: {mean} <= {prev}");
                prev = mean;
            }
        }
    }

    #[test]
    fn sorted_label_shift_first_segment() {
        let sc = StreamScenario {
            batch_size: 1,
            ..StreamScenario::label_shift(10_000, Seed(3))
        };
        let stream = build_stream(&task(), &sc).unwrap();
        let labels: Vec<usize> = stream.iter().flat_map(|b| b.labels().to_vec()).collect();
        assert!(labels[..1000].iter().all(|&y| y == 0));
        assert!(labels[9000..].iter().all(|&y| y == 9));
    }

    #[test]
    fn imbalanced_segment_frequencies() {
        let rho = 5.0;
        let sc = StreamScenario {
            name: "imb".into(),
            batch_size: 10,
            length: 10_000,
            domains: vec![DomainSpec {
                kind: CorruptionKind::AddNoise,
                severity: 1,
                weight: 1.0,
            }],
            labels: LabelSchedule::Imbalanced(rho),
            seed: Seed(4),
        };
        let stream = build_stream(&task(), &sc).unwrap();
        let labels: Vec<usize> = stream.iter().flat_map(|b| b.labels().to_vec()).collect();
        let p_dom = rho / (rho + 9.0);
        let p_other = 1.0 / (rho + 9.0);
        let tol = 3.0 / (1000f64).sqrt();
        for seg in 0..10 {
            let chunk = &labels[seg * 1000..(seg + 1) * 1000];
            for c in 0..10 {
                let freq = chunk.iter().filter(|&&y| y == c).count() as f64 / 1000.0;
                let expect = if c == seg { p_dom } else { p_other };
                assert!((freq - expect).abs() <= tol, "seg {seg} class {c}: {freq}");
            }
        }
    }

    #[test]
    fn domain_mixture_frequencies() {
        let sc = StreamScenario::mixed_domains(10_000, Seed(5));
        let stream = build_stream(&task(), &sc).unwrap();
        let n = 10_000.0;
        for (i, spec) in sc.domains.iter().enumerate() {
            let freq = stream.iter().flat_map(|b| b.domains()).filter(|&&d| d == i).count() as f64 / 9984.0;
            let tol = 3.0 * (spec.weight * (1.0 - spec.weight) / n).sqrt();
            assert!((freq - spec.weight).abs() <= tol, "domain {i}: {freq}");
        }
    }

    #[test]
    fn stream_is_deterministic_and_truncates() {
        let sc = StreamScenario::mixed_domains(1000, Seed(6));
        let a = build_stream(&task(), &sc).unwrap();
        assert_eq!(a, build_stream(&task(), &sc).unwrap());
        assert_eq!(a.len(), 1000 / 64);
        assert!(a.iter().all(|b| b.len() == 64));
        let other = StreamScenario { seed: Seed(7), ..sc };
        assert_ne!(a, build_stream(&task(), &other).unwrap());
    }

    #[test]
    fn point_mass_mixture_is_single_domain() {
        let sc = StreamScenario::single_domain(CorruptionKind::Scale, 500, Seed(8));
        let s = build_stream(&task(), &sc).unwrap();
        assert!(s.iter().flat_map(|b| b.domains()).all(|&d| d == 0));
    }

    #[test]
    fn scenario_validation() {
        let mut sc = StreamScenario::mixed_domains(1000, Seed(1));
        sc.domains[0].weight = 0.5;
        assert!(sc.validate().is_err());
        let mut sc = StreamScenario::label_shift(1000, Seed(1));
        sc.labels = LabelSchedule::Imbalanced(0.5);
        assert!(sc.validate().is_err());
        let mut sc = StreamScenario::label_shift(1000, Seed(1));
        sc.batch_size = 0;
        assert!(sc.validate().is_err());
    }
}
