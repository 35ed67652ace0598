//! CSV and JSON files written for each run.
//!
//! Every CSV starts with a `# <schema> v<N>` line. Readers check it and
//! refuse other versions; bump the version whenever columns change.
//!
//! Per-run step file (`recap-steps v1`), one row per stream sample:
//!
//! | column | meaning |
//! |---|---|
//! | `step`, `batch`, `domain` | sample index, batch index, index into the scenario's domain list |
//! | `y_true`, `y_pred` | 0-based classes; the prediction is made before the batch update |
//! | `entropy`, `l_re`, `l_ri` | nats, at the prediction-time parameters |
//! | `selected`, `weight` | 0/1 and α, as used by the method (0 and 0 for `none`) |
//! | `probe_kl`, `probe_inconsistent` | neighborhood probe, empty when disabled |
//! | `batch_forwards`, `batch_backwards` | model passes spent on this sample's batch |
//! | `step_ns` | wall time of the batch's adaptation step (timing column) |
//!
//! Summary table (`recap-summary v1`), one row per (scenario, method, seed):
//! see [`SummaryRow`]. `median_step_ns` is its only timing column.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use recap_core::adapt::{CollapseEvent, MetricsLog, RunSummary};
use serde::{Deserialize, Serialize};

pub const STEPS_SCHEMA: &str = "recap-steps";
pub const STEPS_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA: &str = "recap-summary";
pub const SUMMARY_VERSION: u32 = 1;

/// Columns excluded when comparing runs for determinism.
pub const TIMING_COLUMNS: &[&str] = &["step_ns", "median_step_ns"];

fn header_line(schema: &str, version: u32) -> String {
    format!("# {schema} v{version}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Opens a versioned CSV, checks its schema line and returns a reader
/// positioned at the column header.
pub fn open_versioned(path: &Path, schema: &str, version: u32) -> Result<csv::Reader<BufReader<File>>> {
    let f = File::open(path).with_context(|| format!("file not found: expected {}", path.display()))?;
    let mut r = BufReader::new(f);
    let mut first = String::new();
    r.read_line(&mut first)?;
    let want = header_line(schema, version);
    if first.trim_end() != want {
        bail!("{}: expected schema line `{want}`, found `{}`", path.display(), first.trim_end());
    }
    Ok(csv::ReaderBuilder::new().from_reader(r))
}

fn opt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn write_steps_csv(path: &Path, log: &MetricsLog) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", header_line(STEPS_SCHEMA, STEPS_VERSION))?;
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "step",
        "batch",
        "domain",
        "y_true",
        "y_pred",
        "entropy",
        "l_re",
        "l_ri",
        "selected",
        "weight",
        "probe_kl",
        "probe_inconsistent",
        "batch_forwards",
        "batch_backwards",
        "step_ns",
    ])?;
    for s in &log.steps {
        let b = &log.batches[s.batch];
        w.write_record([
            s.step.to_string(),
            s.batch.to_string(),
            s.domain.to_string(),
            s.y_true.to_string(),
            s.y_pred.to_string(),
            opt(s.entropy),
            opt(s.l_re),
            opt(s.l_ri),
            u8::from(s.selected).to_string(),
            s.weight.to_string(),
            opt(s.probe_kl),
            opt(s.probe_inconsistent),
            b.forwards.to_string(),
            b.backwards.to_string(),
            b.step_ns.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(step, probe_kl)` pairs from a step file.
pub fn read_probe_kl(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r = open_versioned(path, STEPS_SCHEMA, STEPS_VERSION)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("{}: no `{name}` column", path.display()));
    let (si, ki) = (col("step")?, col("probe_kl")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let kl = rec[ki].parse::<f64>().unwrap_or(f64::NAN);
        out.push((rec[si].parse()?, kl));
    }
    Ok(out)
}

/// Sidecar written next to each step file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSidecar {
    pub schema: String,
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub samples: usize,
    pub accuracy: f64,
    pub per_domain_accuracy: Vec<(usize, usize, f64)>,
    pub forwards: u64,
    pub backwards: u64,
    pub updates: usize,
    pub mean_selected_fraction: f64,
    pub mean_probe_kl: Option<f64>,
    pub mean_probe_inconsistent: Option<f64>,
    pub tail_probe_kl: Option<f64>,
    pub collapse: Option<CollapseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseRecord {
    pub batch: usize,
    pub step: usize,
    pub reason: String,
    pub loss: f64,
    pub max_param_norm: f64,
}

impl From<&CollapseEvent> for CollapseRecord {
    fn from(c: &CollapseEvent) -> Self {
        CollapseRecord {
            batch: c.batch,
            step: c.step,
            reason: c.reason.clone(),
            loss: c.loss,
            max_param_norm: c.max_param_norm,
        }
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl RunSidecar {
    pub fn new(scenario: &str, method: &str, seed: u64, log: &MetricsLog, summary: &RunSummary, tail: usize) -> Self {
        RunSidecar {
            schema: format!("recap-run v{STEPS_VERSION}"),
            scenario: scenario.into(),
            method: method.into(),
            seed,
            samples: summary.samples,
            accuracy: summary.accuracy,
            per_domain_accuracy: summary.per_domain.iter().map(|d| (d.domain, d.samples, d.accuracy)).collect(),
            forwards: summary.forwards,
            backwards: summary.backwards,
            updates: summary.updates,
            mean_selected_fraction: summary.mean_selected_fraction,
            mean_probe_kl: finite(summary.mean_probe_kl),
            mean_probe_inconsistent: finite(summary.mean_probe_inconsistent),
            tail_probe_kl: finite(log.tail_probe_kl(tail)),
            collapse: log.collapse.as_ref().map(CollapseRecord::from),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// One row of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub kind: String,
    pub seed: u64,
    pub lambda: f64,
    pub tau: f64,
    pub tau_re: f64,
    pub l0: f64,
    pub samples: usize,
    pub accuracy: f64,
    pub source_accuracy: f64,
    pub selected_fraction: f64,
    pub updates: usize,
    pub forwards: u64,
    pub backwards: u64,
    pub mean_probe_kl: Option<f64>,
    pub tail_probe_kl: Option<f64>,
    pub mean_probe_inconsistent: Option<f64>,
    pub collapsed: bool,
    pub median_step_ns: u64,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", header_line(SUMMARY_SCHEMA, SUMMARY_VERSION))?;
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = open_versioned(path, SUMMARY_SCHEMA, SUMMARY_VERSION)?;
    r.deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}
