//! Run configuration (TOML).
//!
//! Every table rejects unknown keys. Omitted keys take the defaults below,
//! and the fully resolved config is written next to the outputs so a run can
//! be replayed from its output directory alone.
//!
//! ```toml
//! schema_version = 1
//! seeds = [0, 1, 2, 3, 4]
//!
//! [task]              # classes, input_dim, noise, source_samples
//! [model]             # hidden_dim, feature_dim, epochs, lr, momentum, batch_size, checkpoint_dir
//! [region]            # tau, samples
//! [probe]             # neighbors (0 disables), tail
//!
//! [[scenarios]]
//! name = "label_shift"
//! batch_size = 64
//! length = 10000
//! labels = "imbalanced"   # or "iid"
//! rho = inf
//! domains = [{ kind = "occlude", severity = 5, weight = 1.0 }]
//!
//! [[methods]]
//! kind = "recap"          # none | entropy | entropy_select | recap
//! lambda = 0.5            # optional overrides: name, lambda, tau, tau_re, l0, lr, momentum
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use recap_core::adapt::{MethodConfig, MethodKind};
use recap_core::model::{ModelShape, PretrainOptions};
use recap_core::stream::{CorruptionKind, DomainSpec, LabelSchedule, StreamScenario, SyntheticTask};
use recap_core::{RecapHyper, Seed};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub source_samples: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            classes: 10,
            input_dim: 32,
            noise: SyntheticTask::DEFAULT_NOISE,
            source_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Directory of per-seed checkpoints (`seed<N>.ckpt`). Existing files
    /// are loaded instead of pretraining; missing ones are written.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ModelShape::default();
        let p = PretrainOptions::default();
        ModelConfig {
            hidden_dim: s.hidden_dim,
            feature_dim: s.feature_dim,
            epochs: 3,
            lr: p.lr,
            momentum: p.momentum,
            batch_size: p.batch_size,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub tau: f64,
    /// Source samples used to estimate the feature variances.
    pub samples: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig { tau: 1.2, samples: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    /// Neighbors per test sample; 0 disables probing.
    pub neighbors: usize,
    /// Window (in samples) for the end-of-stream probe statistic.
    pub tail: usize,
    /// Probe with a zero-variance region (a control; every KL is 0).
    pub zero_variance: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            neighbors: 128,
            tail: 1000,
            zero_variance: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelsKind {
    Iid,
    Imbalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub kind: String,
    pub severity: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub batch_size: usize,
    pub length: usize,
    pub labels: LabelsKind,
    /// Imbalance ratio; only read for `labels = "imbalanced"`.
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub domains: Vec<DomainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub kind: String,
    /// Label used in file names and tables; defaults to `kind`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Region scale for this method; defaults to `region.tau`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_re: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
}

impl MethodEntry {
    pub fn of(kind: MethodKind) -> Self {
        MethodEntry {
            kind: kind.name().into(),
            name: None,
            lambda: None,
            tau: None,
            tau_re: None,
            l0: None,
            lr: None,
            momentum: None,
        }
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.kind)
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_rho() -> f64 {
    f64::INFINITY
}

fn domain(kind: CorruptionKind, severity: u8, weight: f64) -> DomainConfig {
    DomainConfig {
        kind: kind.name().into(),
        severity,
        weight,
    }
}

/// The three wild scenarios at `T = 10⁴`.
pub fn default_scenarios() -> Vec<ScenarioConfig> {
    let length = 10_000;
    vec![
        ScenarioConfig {
            name: "bs1_occlude".into(),
            batch_size: 1,
            length,
            labels: LabelsKind::Iid,
            rho: f64::INFINITY,
            domains: vec![domain(CorruptionKind::Occlude, 5, 1.0)],
        },
        ScenarioConfig {
            name: "mixed".into(),
            batch_size: 64,
            length,
            labels: LabelsKind::Iid,
            rho: f64::INFINITY,
            domains: CorruptionKind::ALL
                .into_iter()
                .flat_map(|k| [domain(k, 5, 0.125), domain(k, 4, 0.125)])
                .collect(),
        },
        ScenarioConfig {
            name: "label_shift".into(),
            batch_size: 64,
            length,
            labels: LabelsKind::Imbalanced,
            rho: f64::INFINITY,
            domains: CorruptionKind::ALL.into_iter().map(|k| domain(k, 5, 0.25)).collect(),
        },
    ]
}

fn default_methods() -> Vec<MethodEntry> {
    [MethodKind::None, MethodKind::Entropy, MethodKind::Recap]
        .into_iter()
        .map(MethodEntry::of)
        .collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seeds: default_seeds(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            region: RegionConfig::default(),
            probe: ProbeSettings::default(),
            scenarios: default_scenarios(),
            methods: default_methods(),
        }
    }
}

/// A method entry resolved against the task and region defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedMethod {
    pub label: String,
    pub config: MethodConfig,
    pub tau: f64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| anyhow!("config is not valid TOML: {e}"))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("config error at `{path}`: {}", e.into_inner().message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("config not found: expected {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "config error at `schema_version`: expected {SCHEMA_VERSION}, found {}",
            self.schema_version
        );
        ensure!(!self.seeds.is_empty(), "config error at `seeds`: at least one seed is required");
        let t = &self.task;
        ensure!(t.classes >= 2, "config error at `task.classes`: need at least 2");
        ensure!(t.input_dim >= 1, "config error at `task.input_dim`: must be positive");
        ensure!(t.noise >= 0.0 && t.noise.is_finite(), "config error at `task.noise`: must be finite and >= 0");
        ensure!(
            t.source_samples >= t.classes.max(self.region.samples).max(2),
            "config error at `task.source_samples`: need at least max(classes, region.samples)"
        );
        ensure!(self.model.epochs >= 1, "config error at `model.epochs`: must be >= 1");
        ensure!(self.model.batch_size >= 1, "config error at `model.batch_size`: must be >= 1");
        ensure!(self.region.tau > 0.0, "config error at `region.tau`: must be > 0");
        ensure!(self.region.samples >= 2, "config error at `region.samples`: need at least 2");
        ensure!(!self.scenarios.is_empty(), "config error at `scenarios`: at least one scenario is required");
        ensure!(!self.methods.is_empty(), "config error at `methods`: at least one method is required");
        for (i, s) in self.scenarios.iter().enumerate() {
            self.scenario(i, Seed(0)).with_context(|| format!("config error at `scenarios[{i}]` ({})", s.name))?;
        }
        for (i, _) in self.methods.iter().enumerate() {
            self.method(i).with_context(|| format!("config error at `methods[{i}]`"))?;
        }
        let mut names: Vec<&str> = self.scenarios.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("config error at `scenarios`: duplicate name `{}`", w[0]);
        }
        let mut labels: Vec<&str> = self.methods.iter().map(|m| m.label()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            bail!("config error at `methods`: duplicate label `{}` (set `name`)", w[0]);
        }
        Ok(())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.task.input_dim,
            hidden_dim: self.model.hidden_dim,
            feature_dim: self.model.feature_dim,
            classes: self.task.classes,
        }
    }

    pub fn pretrain_options(&self, seed: Seed) -> PretrainOptions {
        PretrainOptions {
            epochs: self.model.epochs,
            lr: self.model.lr,
            momentum: self.model.momentum,
            batch_size: self.model.batch_size,
            seed,
        }
    }

    pub fn scenario(&self, index: usize, seed: Seed) -> Result<StreamScenario> {
        let s = &self.scenarios[index];
        let domains = s
            .domains
            .iter()
            .map(|d| {
                Ok(DomainSpec {
                    kind: d.kind.parse::<CorruptionKind>()?,
                    severity: d.severity,
                    weight: d.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = match s.labels {
            LabelsKind::Iid => LabelSchedule::Iid,
            LabelsKind::Imbalanced => LabelSchedule::Imbalanced(s.rho),
        };
        let scenario = StreamScenario {
            name: s.name.clone(),
            batch_size: s.batch_size,
            length: s.length,
            domains,
            labels,
            seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn method(&self, index: usize) -> Result<ResolvedMethod> {
        let m = &self.methods[index];
        let kind: MethodKind = m.kind.parse()?;
        let mut config = MethodConfig::new(kind, self.task.classes);
        let h = config.hyper;
        config.hyper = RecapHyper::new(
            m.lambda.unwrap_or(h.lambda),
            m.tau_re.unwrap_or(h.tau_re),
            m.l0.unwrap_or(h.l0),
        )?;
        config.lr = m.lr.unwrap_or(config.lr);
        config.momentum = m.momentum.unwrap_or(config.momentum);
        ensure!(config.lr > 0.0, "lr must be > 0");
        ensure!((0.0..1.0).contains(&config.momentum), "momentum must be in [0, 1)");
        let tau = m.tau.unwrap_or(self.region.tau);
        ensure!(tau > 0.0, "tau must be > 0");
        Ok(ResolvedMethod {
            label: m.label().to_string(),
            config,
            tau,
        })
    }
}
