//! Pretraining, region estimation and the (scenario × method × seed) grid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use recap_core::adapt::{run_stream, MetricsLog, ProbeConfig, RunOptions};
use recap_core::model::{accuracy, pretrain_source, Dataset, TinyBackbone};
use recap_core::region::estimate_region;
use recap_core::stream::{build_stream, gen_source_dataset, SyntheticTask};
use recap_core::{AffineHead, Matrix, RegionSpec, Seed};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, CONFIG_FILE};
use crate::metrics::{self, RunSidecar, SummaryRow};
use crate::StdClock;

// Sub-stream tags under each replicate seed.
const TAG_TASK: u64 = 1;
const TAG_PRETRAIN: u64 = 2;
const TAG_STREAM: u64 = 100;
const TAG_PROBE: u64 = 200;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_DIR: &str = "runs";

/// Source model and region for one replicate seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub task: SyntheticTask,
    pub backbone: TinyBackbone,
    pub head: AffineHead,
    /// Source-feature variances at `region.tau`.
    pub region: RegionSpec,
    pub source_accuracy: f64,
}

impl Prepared {
    pub fn region_at(&self, tau: f64) -> Result<RegionSpec> {
        Ok(self.region.with_tau(tau)?)
    }
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed{seed}.ckpt"))
}

fn source_features(backbone: &TinyBackbone, data: &Dataset, n: usize) -> Result<Matrix> {
    let rows = (0..n)
        .map(|i| Ok(backbone.features(data.inputs.row(i))?.z))
        .collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_rows(&rows)?)
}

/// Builds the task, then loads the seed's checkpoint if `checkpoint_dir`
/// holds one, otherwise pretrains (and saves when a directory is given).
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let root = Seed(seed);
    let task = SyntheticTask::new(cfg.task.classes, cfg.task.input_dim, cfg.task.noise, root.derive(TAG_TASK))?;
    let source = gen_source_dataset(&task, cfg.task.source_samples)?;
    let ckpt = cfg.model.checkpoint_dir.as_ref().map(|d| checkpoint_path(d, seed));

    let (backbone, head, source_accuracy) = match &ckpt {
        Some(path) if path.exists() => {
            let c = Checkpoint::load(path)?;
            let acc = accuracy(&source, &c.backbone, &c.head)?;
            (c.backbone, c.head, acc)
        }
        _ => {
            let p = pretrain_source(&source, cfg.shape(), cfg.pretrain_options(root.derive(TAG_PRETRAIN)))?;
            (p.backbone, p.head, p.source_accuracy)
        }
    };
    let feats = source_features(&backbone, &source, cfg.region.samples)?;
    let region = estimate_region(&feats, cfg.region.tau)?;

    if let Some(path) = &ckpt {
        if !path.exists() {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            let c = Checkpoint {
                backbone: backbone.clone(),
                head: head.clone(),
                region: Some(region.clone()),
            };
            c.save(path)?;
        }
    }
    Ok(Prepared {
        seed,
        task,
        backbone,
        head,
        region,
        source_accuracy,
    })
}

/// One finished grid cell.
#[derive(Debug, Clone)]
pub struct Cell {
    pub row: SummaryRow,
    pub log: MetricsLog,
}

fn median(mut v: Vec<u64>) -> u64 {
    if v.is_empty() {
        return 0;
    }
    v.sort_unstable();
    v[v.len() / 2]
}

/// Runs method `mi` on scenario `si` for a prepared seed. Streams and probe
/// draws depend only on (seed, scenario), so every method sees the same data.
pub fn run_cell(cfg: &RunConfig, prep: &Prepared, si: usize, mi: usize) -> Result<Cell> {
    let root = Seed(prep.seed);
    let scenario = cfg.scenario(si, root.derive(TAG_STREAM + si as u64))?;
    let method = cfg.method(mi)?;
    let stream = build_stream(&prep.task, &scenario)?;
    let region = prep.region_at(method.tau)?;

    let probe = (cfg.probe.neighbors > 0).then(|| -> Result<ProbeConfig> {
        let base = if cfg.probe.zero_variance {
            RegionSpec::new(vec![0.0; region.dim()], region.tau())?
        } else {
            region.clone()
        };
        Ok(ProbeConfig {
            region: base,
            neighbors: cfg.probe.neighbors,
            seed: root.derive(TAG_PROBE + si as u64),
        })
    });
    let opts = RunOptions { probe: probe.transpose()? };

    let mut backbone = prep.backbone.clone();
    let log = run_stream(&mut backbone, &prep.head, &stream, &method.config, Some(&region), &opts, &mut StdClock::new())?;
    let s = log.summary();
    let finite = |v: f64| v.is_finite().then_some(v);
    let row = SummaryRow {
        scenario: scenario.name.clone(),
        method: method.label.clone(),
        kind: method.config.kind.name().into(),
        seed: prep.seed,
        lambda: method.config.hyper.lambda,
        tau: method.tau,
        tau_re: method.config.hyper.tau_re,
        l0: method.config.hyper.l0,
        samples: s.samples,
        accuracy: s.accuracy,
        source_accuracy: prep.source_accuracy,
        selected_fraction: s.mean_selected_fraction,
        updates: s.updates,
        forwards: s.forwards,
        backwards: s.backwards,
        mean_probe_kl: finite(s.mean_probe_kl),
        tail_probe_kl: finite(log.tail_probe_kl(cfg.probe.tail)),
        mean_probe_inconsistent: finite(s.mean_probe_inconsistent),
        collapsed: s.collapsed,
        median_step_ns: median(log.batches.iter().map(|b| b.step_ns).collect()),
    };
    Ok(Cell { row, log })
}

pub fn run_file_stem(scenario: &str, method: &str, seed: u64) -> String {
    format!("{scenario}__{method}__seed{seed}")
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

/// Pretrains every seed (in parallel).
pub fn prepare_all(cfg: &RunConfig, threads: Option<usize>) -> Result<Vec<Prepared>> {
    pool(threads)?.install(|| cfg.seeds.par_iter().map(|&s| prepare(cfg, s).with_context(|| format!("preparing seed {s}"))).collect())
}

fn grid_cells(cfg: &RunConfig, seeds: usize) -> Vec<(usize, usize, usize)> {
    let mut cells = Vec::new();
    for si in 0..cfg.scenarios.len() {
        for mi in 0..cfg.methods.len() {
            for pi in 0..seeds {
                cells.push((si, mi, pi));
            }
        }
    }
    cells
}

/// Runs the full grid. With `out`, writes the resolved config, one step CSV
/// and sidecar per cell, and the summary table. Rows are ordered by
/// scenario, method, seed, as listed in the config.
pub fn run_grid(cfg: &RunConfig, out: Option<&Path>, threads: Option<usize>) -> Result<Vec<SummaryRow>> {
    if let Some(dir) = out {
        fs::create_dir_all(dir.join(RUNS_DIR)).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    }
    let preps = prepare_all(cfg, threads)?;
    let cells = grid_cells(cfg, preps.len());
    let rows = pool(threads)?.install(|| {
        cells
            .par_iter()
            .map(|&(si, mi, pi)| {
                let cell = run_cell(cfg, &preps[pi], si, mi)?;
                if let Some(dir) = out {
                    let stem = run_file_stem(&cell.row.scenario, &cell.row.method, cell.row.seed);
                    let runs = dir.join(RUNS_DIR);
                    metrics::write_steps_csv(&runs.join(format!("{stem}.csv")), &cell.log)?;
                    RunSidecar::new(&cell.row.scenario, &cell.row.method, cell.row.seed, &cell.log, &cell.log.summary(), cfg.probe.tail)
                        .write(&runs.join(format!("{stem}.summary.json")))?;
                }
                Ok(cell.row)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    if let Some(dir) = out {
        metrics::write_summary(&dir.join(SUMMARY_FILE), &rows)?;
    }
    Ok(rows)
}

pub const PROBE_SCHEMA: &str = "recap-probe";
pub const PROBE_VERSION: u32 = 1;

/// Probe trajectories only: one CSV per cell (`step,domain,probe_kl,
/// probe_inconsistent`, schema `recap-probe v1`) under `<out>/probe/`,
/// plus `probe_summary.csv` with the tail statistic per cell.
pub fn run_probe(cfg: &RunConfig, out: &Path, threads: Option<usize>) -> Result<Vec<SummaryRow>> {
    let mut cfg = cfg.clone();
    if cfg.probe.neighbors == 0 {
        cfg.probe.neighbors = crate::config::ProbeSettings::default().neighbors;
    }
    let dir = out.join("probe");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    let preps = prepare_all(&cfg, threads)?;
    let cells = grid_cells(&cfg, preps.len());
    let rows = pool(threads)?.install(|| {
        cells
            .par_iter()
            .map(|&(si, mi, pi)| {
                let cell = run_cell(&cfg, &preps[pi], si, mi)?;
                let stem = run_file_stem(&cell.row.scenario, &cell.row.method, cell.row.seed);
                let path = dir.join(format!("{stem}.csv"));
                let mut w = std::io::BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                writeln!(w, "# {PROBE_SCHEMA} v{PROBE_VERSION}")?;
                let mut w = csv::Writer::from_writer(w);
                w.write_record(["step", "domain", "probe_kl", "probe_inconsistent"])?;
                for s in &cell.log.steps {
                    w.write_record([s.step.to_string(), s.domain.to_string(), s.probe_kl.to_string(), s.probe_inconsistent.to_string()])?;
                }
                w.flush()?;
                Ok(cell.row)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    metrics::write_summary(&out.join("probe_summary.csv"), &rows)?;
    Ok(rows)
}
