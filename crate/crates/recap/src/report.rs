//! Aggregates a run directory into tables and plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use recap_core::RecapHyper;
use serde::Serialize;

use crate::config::{RunConfig, CONFIG_FILE};
use crate::metrics::{self, SummaryRow};
use crate::pipeline::{run_file_stem, RUNS_DIR, SUMMARY_FILE};
use crate::plot::{line_plot, Series};

/// Windows per stream in the KL-vs-step curves.
const KL_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub scenario: String,
    pub method: String,
    pub kind: String,
    pub lambda: f64,
    pub tau: f64,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub tail_probe_kl_mean: Option<f64>,
    pub selected_fraction_mean: f64,
    pub collapsed_runs: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Groups rows by (scenario, method), keeping first-seen order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.scenario.clone(), r.method.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let acc: Vec<f64> = g.iter().map(|r| r.accuracy).collect();
            let kl: Vec<f64> = g.iter().filter_map(|r| r.tail_probe_kl).collect();
            let sel: Vec<f64> = g.iter().map(|r| r.selected_fraction).collect();
            AggregateRow {
                scenario: key.0,
                method: key.1,
                kind: g[0].kind.clone(),
                lambda: g[0].lambda,
                tau: g[0].tau,
                seeds: g.len(),
                accuracy_mean: mean(&acc),
                accuracy_std: sample_std(&acc),
                tail_probe_kl_mean: (kl.len() == g.len()).then(|| mean(&kl)),
                selected_fraction_mean: mean(&sel),
                collapsed_runs: g.iter().filter(|r| r.collapsed).count(),
            }
        })
        .collect()
}

pub fn markdown_table(agg: &[AggregateRow]) -> String {
    let mut s = String::from("| scenario | method | seeds | accuracy (%) | tail probe KL | selected | collapsed |\n|---|---|---:|---:|---:|---:|---:|\n");
    for a in agg {
        let kl = a.tail_probe_kl_mean.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.2} ± {:.2} | {} | {:.3} | {} |",
            a.scenario,
            a.method,
            a.seeds,
            100.0 * a.accuracy_mean,
            100.0 * a.accuracy_std,
            kl,
            a.selected_fraction_mean,
            a.collapsed_runs
        );
    }
    s
}

/// Recap curves over one hyperparameter with the other held at `fixed`.
fn ablation_series(agg: &[AggregateRow], x: impl Fn(&AggregateRow) -> f64, other: impl Fn(&AggregateRow) -> f64, fixed: f64) -> Vec<Series> {
    let mut by_scenario: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for a in agg.iter().filter(|a| a.kind == "recap" && other(a) == fixed) {
        let pt = (x(a), a.accuracy_mean);
        match by_scenario.iter_mut().find(|(s, _)| *s == a.scenario) {
            Some((_, pts)) => pts.push(pt),
            None => by_scenario.push((a.scenario.clone(), vec![pt])),
        }
    }
    by_scenario
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            points.dedup_by(|a, b| a.0 == b.0);
            Series { label, points }
        })
        .filter(|s| s.points.len() >= 2)
        .collect()
}

/// Mean probe KL over seeds in `KL_BINS` windows, per method.
fn kl_series(runs: &Path, scenario: &str, rows: &[SummaryRow]) -> Result<Vec<Series>> {
    let mut out: Vec<Series> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.scenario == scenario && r.mean_probe_kl.is_some()) {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for m in methods {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        let mut width = 1;
        for r in rows.iter().filter(|r| r.scenario == scenario && r.method == m) {
            let path = runs.join(format!("{}.csv", run_file_stem(scenario, m, r.seed)));
            let kl = metrics::read_probe_kl(&path)?;
            width = kl.len().div_ceil(KL_BINS).max(1);
            if sums.is_empty() {
                sums = vec![(0.0, 0); kl.len().div_ceil(width)];
            }
            for (step, v) in kl {
                if let Some(slot) = sums.get_mut(step / width) {
                    if v.is_finite() {
                        slot.0 += v;
                        slot.1 += 1;
                    }
                }
            }
        }
        let points = sums
            .iter()
            .enumerate()
            .filter(|(_, s)| s.1 > 0)
            .map(|(i, s)| (((i + 1) * width) as f64, s.0 / s.1 as f64))
            .collect();
        out.push(Series { label: m.to_string(), points });
    }
    Ok(out)
}

/// Reads `<input>/summary.csv` (and the per-run files for KL curves), writes
/// `report.csv`, `report.md` and any applicable plots to `out`. Returns the
/// written paths.
pub fn write_report(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let rows = metrics::read_summary(&input.join(SUMMARY_FILE))?;
    let cfg_path = input.join(CONFIG_FILE);
    let cfg = if cfg_path.exists() { RunConfig::load(&cfg_path)? } else { RunConfig::default() };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();

    let agg = aggregate(&rows);
    let table = out.join("report.csv");
    let mut w = csv::Writer::from_path(&table)?;
    for a in &agg {
        w.serialize(a)?;
    }
    w.flush()?;
    written.push(table);
    let md = out.join("report.md");
    fs::write(&md, markdown_table(&agg))?;
    written.push(md);

    let base_lambda = RecapHyper::for_classes(cfg.task.classes).lambda;
    let lam = ablation_series(&agg, |a| a.lambda, |a| a.tau, cfg.region.tau);
    if !lam.is_empty() {
        line_plot(out, "accuracy_vs_lambda", "ReCAP accuracy vs variance weight", "lambda", "online accuracy", &lam)?;
        written.push(out.join("accuracy_vs_lambda.svg"));
    }
    let tau = ablation_series(&agg, |a| a.tau, |a| a.lambda, base_lambda);
    if !tau.is_empty() {
        line_plot(out, "accuracy_vs_tau", "ReCAP accuracy vs region scale", "tau", "online accuracy", &tau)?;
        written.push(out.join("accuracy_vs_tau.svg"));
    }

    let runs = input.join(RUNS_DIR);
    let mut scenarios: Vec<&str> = Vec::new();
    for r in &rows {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
    }
    for s in scenarios {
        let series = kl_series(&runs, s, &rows)?;
        if series.iter().any(|s| !s.points.is_empty()) {
            let stem = format!("kl_vs_step_{s}");
            line_plot(out, &stem, &format!("probe KL, {s}"), "step", "mean probe KL", &series)?;
            written.push(out.join(format!("{stem}.svg")));
        }
    }
    Ok(written)
}
