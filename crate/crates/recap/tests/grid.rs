mod common;

use std::fs;
use std::path::Path;

use recap::bench::{bench_proxy_vs_mc, method_counters};
use recap::config::{MethodEntry, CONFIG_FILE};
use recap::metrics::{self, read_summary, SummaryRow};
use recap::pipeline::{self, prepare, RUNS_DIR, SUMMARY_FILE};
use recap::report::write_report;
use recap_core::adapt::MethodKind;
use recap_core::{Matrix, Seed};

fn files_with(dir: &Path, suffix: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(suffix))
        .collect();
    v.sort();
    v
}

/// Everything except wall-clock columns.
fn strip_timing(rows: &[SummaryRow]) -> Vec<SummaryRow> {
    rows.iter().cloned().map(|r| SummaryRow { median_step_ns: 0, ..r }).collect()
}

fn steps_without_timing(path: &Path) -> Vec<Vec<String>> {
    let mut r = metrics::open_versioned(path, metrics::STEPS_SCHEMA, metrics::STEPS_VERSION).unwrap();
    let header = r.headers().unwrap().clone();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !metrics::TIMING_COLUMNS.contains(&&header[i])).collect();
    r.records().map(|rec| keep.iter().map(|&i| rec.as_ref().unwrap()[i].to_string()).collect()).collect()
}

#[test]
fn grid_writes_one_file_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny();
    let rows = pipeline::run_grid(&cfg, Some(dir.path()), Some(2)).unwrap();
    assert_eq!(rows.len(), 15);

    let runs = dir.path().join(RUNS_DIR);
    let csvs = files_with(&runs, ".csv");
    assert_eq!(csvs.len(), 15);
    assert_eq!(files_with(&runs, ".summary.json").len(), 15);
    assert!(csvs.contains(&"tiny__recap__seed4.csv".to_string()));
    assert_eq!(files_with(dir.path(), ".csv"), vec![SUMMARY_FILE.to_string()]);

    let summary = read_summary(&dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.len(), 15);
    assert_eq!(strip_timing(&summary), strip_timing(&rows));
    let head = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    assert!(head.starts_with("# recap-summary v1\n"));

    let first = fs::read_to_string(runs.join("tiny__none__seed0.csv")).unwrap();
    assert!(first.starts_with("# recap-steps v1\n"));
    assert_eq!(first.lines().count(), 2 + 160);

    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(runs.join("tiny__entropy__seed2.summary.json")).unwrap()).unwrap();
    assert_eq!(side["seed"], 2);
    assert_eq!(side["method"], "entropy");

    let reloaded = recap::config::RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(reloaded, cfg);
}

#[test]
fn reruns_match_except_timing() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = common::tiny_with_seeds(&[7, 8]);
    let ra = pipeline::run_grid(&cfg, Some(a.path()), Some(1)).unwrap();
    let rb = pipeline::run_grid(&cfg, Some(b.path()), Some(3)).unwrap();
    assert_eq!(strip_timing(&ra), strip_timing(&rb));
    for name in files_with(&a.path().join(RUNS_DIR), ".csv") {
        let pa = a.path().join(RUNS_DIR).join(&name);
        let pb = b.path().join(RUNS_DIR).join(&name);
        assert_eq!(steps_without_timing(&pa), steps_without_timing(&pb), "{name}");
    }
}

#[test]
fn zero_variance_probe_reports_no_disagreement() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_with_seeds(&[1]);
    cfg.probe.zero_variance = true;
    let rows = pipeline::run_probe(&cfg, dir.path(), Some(1)).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.mean_probe_kl, Some(0.0), "{}", r.method);
        assert_eq!(r.mean_probe_inconsistent, Some(0.0));
    }
    let files = files_with(&dir.path().join("probe"), ".csv");
    assert_eq!(files.len(), 3);
    let text = fs::read_to_string(dir.path().join("probe").join(&files[0])).unwrap();
    assert!(text.starts_with("# recap-probe v1\nstep,domain,probe_kl,probe_inconsistent\n"));
}

#[test]
fn lambda_sweep_report_has_one_curve_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_with_seeds(&[0, 1]);
    let mut second = cfg.scenarios[0].clone();
    second.name = "tiny2".into();
    second.domains[0].kind = "scale".into();
    cfg.scenarios.push(second);
    cfg.methods = [0.0, 0.5, 2.0]
        .iter()
        .map(|&l| MethodEntry {
            name: Some(format!("recap_{l}")),
            lambda: Some(l),
            tau_re: Some(10.0),
            ..MethodEntry::of(MethodKind::Recap)
        })
        .collect();
    pipeline::run_grid(&cfg, Some(dir.path()), None).unwrap();
    let out = dir.path().join("report");
    let written = write_report(dir.path(), &out).unwrap();
    assert!(written.iter().any(|p| p.ends_with("accuracy_vs_lambda.svg")));
    assert!(!out.join("accuracy_vs_tau.svg").exists());

    let mut r = csv::Reader::from_path(out.join("accuracy_vs_lambda.csv")).unwrap();
    let mut curves: Vec<(String, usize)> = Vec::new();
    for rec in r.records() {
        let label = rec.unwrap()[0].to_string();
        match curves.iter_mut().find(|c| c.0 == label) {
            Some(c) => c.1 += 1,
            None => curves.push((label, 1)),
        }
    }
    assert_eq!(curves, vec![("tiny".to_string(), 3), ("tiny2".to_string(), 3)]);

    let svg = fs::read_to_string(out.join("accuracy_vs_lambda.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    for s in ["tiny", "tiny2"] {
        assert!(out.join(format!("kl_vs_step_{s}.svg")).exists());
        assert!(out.join(format!("kl_vs_step_{s}.csv")).exists());
    }
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 6);
}

#[test]
fn bench_outputs_have_expected_columns() {
    let cfg = common::tiny_with_seeds(&[0]);
    let prep = prepare(&cfg, 0).unwrap();
    let scenario = cfg.scenario(0, Seed(0)).unwrap();
    let rows = method_counters(&prep, &scenario, &MethodKind::ALL).unwrap();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).unwrap();
    }
    let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    for col in ["method", "forwards", "backwards", "median_step_ns"] {
        assert!(header.contains(&col), "{header:?}");
    }
    let none = rows.iter().find(|r| r.method == "none").unwrap();
    assert_eq!(none.backwards, 0);
    assert_eq!(none.forwards, none.batches as u64);

    let z = Matrix::from_rows(&vec![vec![0.1; prep.head.dim()]; 4]).unwrap();
    let t = bench_proxy_vs_mc(&prep.head, &prep.region, &z, 8, 10, Seed(0)).unwrap();
    assert_eq!((t.batch, t.classes, t.dim, t.n_mc, t.repeats), (4, 10, 16, 8, 10));
    assert!(bench_proxy_vs_mc(&prep.head, &prep.region, &z, 8, 3, Seed(0)).is_err());
}
