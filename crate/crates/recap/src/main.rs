use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use recap_core::adapt::MethodKind;
use recap_core::stream::build_stream;
use recap_core::Seed;

use recap::bench::{bench_proxy_vs_mc, feature_batch, method_counters};
use recap::checkpoint::Checkpoint;
use recap::config::{RunConfig, CONFIG_FILE};
use recap::pipeline::{self, checkpoint_path};
use recap::verify::{self, failure_records, report_line, GRAD_SUITES, VERIFY_SUITES};
use recap::report;

#[derive(Parser)]
#[command(version, about = "Region-confidence proxies: verification, desk-scale adaptation runs and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (TOML); built-in defaults when omitted
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for independent cells (default: all cores)
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        Ok(cfg)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Bound, degeneration and invariance suites
    Verify {
        /// Run only these suites (repeatable)
        #[arg(long, value_name = "NAME")]
        suite: Vec<String>,
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        /// Instances per suite (defaults per suite)
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
        /// Write failing instances to DIR/failures.json
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
    },
    /// Finite-difference gradient suites
    Gradcheck {
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
        /// Instances per suite (defaults: 100 for grad_z, 50 for the affine chain)
        #[arg(long, value_name = "N")]
        samples: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        threads: Option<usize>,
    },
    /// Pretrain source models and write one checkpoint per seed
    Pretrain(Common),
    /// Run the (scenario x method x seed) grid
    Run(Common),
    /// Closed-form vs sampling timing and per-method pass counters
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "N", default_value_t = 100)]
        repeats: usize,
    },
    /// Neighborhood-consistency trajectories
    Probe(Common),
    /// Tables and plots from a run directory
    Report {
        /// Directory written by `run`
        #[arg(value_name = "RUN_DIR")]
        input: PathBuf,
        /// Defaults to RUN_DIR/report
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn set_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // only fails if a global pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Verify {
            suite,
            seed,
            samples,
            out,
            threads,
        } => {
            set_threads(threads);
            let names: Vec<&str> = if suite.is_empty() {
                VERIFY_SUITES.to_vec()
            } else {
                suite.iter().map(String::as_str).collect()
            };
            run_suites(&names, Seed(seed), samples, out.as_deref())
        }
        Command::Gradcheck {
            seed,
            samples,
            out,
            threads,
        } => {
            set_threads(threads);
            run_suites(GRAD_SUITES, Seed(seed), samples, out.as_deref())
        }
        Command::Pretrain(c) => {
            let cfg = c.config()?;
            let out = c.out_or("checkpoints");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut cfg = cfg;
            cfg.model.checkpoint_dir = None;
            for prep in pipeline::prepare_all(&cfg, c.threads)? {
                let path = checkpoint_path(&out, prep.seed);
                Checkpoint {
                    backbone: prep.backbone,
                    head: prep.head,
                    region: Some(prep.region),
                }
                .save(&path)?;
                println!("seed {}: source accuracy {:.4} -> {}", prep.seed, prep.source_accuracy, path.display());
            }
            cfg.model.checkpoint_dir = Some(out.clone());
            fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
            Ok(true)
        }
        Command::Run(c) => {
            let cfg = c.config()?;
            let out = c.out_or("recap-out");
            let rows = pipeline::run_grid(&cfg, Some(&out), c.threads)?;
            print!("{}", report::markdown_table(&report::aggregate(&rows)));
            let collapsed = rows.iter().filter(|r| r.collapsed).count();
            if collapsed > 0 {
                println!("{collapsed} run(s) collapsed; see the .summary.json sidecars");
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Bench { common, repeats } => bench(&common, repeats),
        Command::Probe(c) => {
            let cfg = c.config()?;
            let out = c.out_or("recap-probe");
            let rows = pipeline::run_probe(&cfg, &out, c.threads)?;
            for r in &rows {
                let kl = r.tail_probe_kl.map_or("-".into(), |v| format!("{v:.4}"));
                println!("{} {} seed {}: tail probe KL {kl}", r.scenario, r.method, r.seed);
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.join("report"));
            for p in report::write_report(&input, &out)? {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
    }
}

fn run_suites(names: &[&str], seed: Seed, samples: Option<usize>, out: Option<&Path>) -> Result<bool> {
    let reports = verify::run_suites(names, seed, samples)?;
    let mut failures = Vec::new();
    for r in &reports {
        println!("{}", report_line(r));
        for f in r.failures.iter().take(3) {
            println!("  #{}: {}", f.index, f.detail);
        }
        failures.extend(failure_records(r));
    }
    if !failures.is_empty() {
        match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join("failures.json");
                fs::write(&path, serde_json::to_string_pretty(&failures)?)?;
                println!("{} failing instance(s) written to {}", failures.len(), path.display());
            }
            None => {
                println!("first failing instance:\n{}", serde_json::to_string_pretty(&failures[0])?);
            }
        }
    }
    Ok(reports.iter().all(|r| r.ok()))
}

fn bench(c: &Common, repeats: usize) -> Result<bool> {
    let cfg = c.config()?;
    let out = c.out_or("recap-bench");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let seed = cfg.seeds[0];
    let mut one = cfg.clone();
    one.seeds = vec![seed];
    let prep = pipeline::prepare(&one, seed)?;

    let scenario = one.scenario(0, Seed(seed).derive(100))?;
    let mut timing = scenario.clone();
    timing.length = timing.length.max(64);
    let batch = feature_batch(&prep.backbone, &build_stream(&prep.task, &timing)?, 64)?;
    let t = bench_proxy_vs_mc(&prep.head, &prep.region, &batch, 128, repeats, Seed(seed))?;
    println!(
        "closed form {} ns, sampling ({} draws) {} ns, speedup {:.1}x (median of {})",
        t.closed_median_ns, t.n_mc, t.mc_median_ns, t.speedup, t.repeats
    );
    let mut w = csv::Writer::from_path(out.join("proxy_timing.csv"))?;
    w.serialize(&t)?;
    w.flush()?;

    let counters = method_counters(&prep, &scenario, &MethodKind::ALL)?;
    let mut w = csv::Writer::from_path(out.join("method_counters.csv"))?;
    for r in &counters {
        println!(
            "{}: {} batches, {} forwards, {} backwards, median step {} ns",
            r.method, r.batches, r.forwards, r.backwards, r.median_step_ns
        );
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(out.join(CONFIG_FILE), one.to_toml()?)?;
    println!("wrote {}", out.display());
    Ok(true)
}
