use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use varbranch::trainer::EvalPolicy;
use varbranch_cli::compare::{compare_report, CompareOptions};
use varbranch_cli::curves::{aggregate_curves, CurveBundle};
use varbranch_cli::error::EXIT_CENSORED;
use varbranch_cli::featmap::MapKind;
use varbranch_cli::run::{eval_checkpoint, export_feature_map, run_experiment, RunOptions};
use varbranch_cli::{parse_config, CliError, ModeSelection, Result};

#[derive(Parser)]
#[command(name = "varbranch", version, about = "Variance-branch actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (mode, seed) cell of a config and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// variance, baseline or both
        #[arg(long)]
        mode: Option<ModeSelection>,
        #[arg(long)]
        sigma2: Option<f64>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Score a checkpoint on noise-free episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample actions instead of acting greedily.
        #[arg(long)]
        sampling: bool,
    },
    /// Align score CSVs on a common step grid and write min/mean/max envelopes.
    Aggregate {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write a checkpoint's value or variance map as PGM and CSV.
    ExportMap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// value or variance
        #[arg(long, default_value = "value")]
        which: MapKind,
        /// Seed of the episode whose first observation is mapped.
        #[arg(long, default_value_t = 0)]
        obs_seed: u64,
        /// Output path without extension.
        #[arg(long)]
        out: PathBuf,
        /// Also blend the map over the newest observation frame.
        #[arg(long)]
        overlay: bool,
    },
    /// Compare two curve bundles: steps to threshold and final scores.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        threshold: f64,
        /// Step reported for seeds that never reach the threshold.
        #[arg(long)]
        budget: Option<u64>,
        #[arg(long, default_value_t = 5)]
        window: usize,
        /// Summary CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn label(p: &std::path::Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, mode, sigma2, seeds, workers, steps, out, parallel } => {
            let mut cfg = parse_config(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = sigma2 {
                cfg.noise.sigma2 = s;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(w) = workers {
                cfg.trainer.workers = w;
            }
            if let Some(s) = steps {
                cfg.trainer.total_steps = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let outcome = run_experiment(&cfg, RunOptions { parallel })?;
            println!("wrote {} artifacts to {} (config hash {})", outcome.manifest.artifacts.len(), outcome.dir.display(), outcome.manifest.config_hash);
            for (mode, curve) in &outcome.curves {
                if let Some(last) = curve.mean.last() {
                    println!("{mode}: final mean eval return {last:.4}");
                }
            }
            if let Some(report) = outcome.comparison {
                print!("{}", report.to_csv());
            }
        }
        Command::Eval { checkpoint, episodes, seed, sampling } => {
            let policy = if sampling { EvalPolicy::Sampling } else { EvalPolicy::Greedy };
            let r = eval_checkpoint(&checkpoint, episodes, policy, seed)?;
            println!("mean_return {}", r.mean);
            println!("returns {:?}", r.returns);
        }
        Command::Aggregate { out, inputs } => {
            let bundle = aggregate_curves(&inputs)?;
            bundle.write(&out)?;
            println!("aggregated {} series over {} steps into {}", bundle.series.len(), bundle.steps.len(), out.display());
        }
        Command::ExportMap { checkpoint, which, obs_seed, out, overlay } => {
            for p in export_feature_map(&checkpoint, None, obs_seed, which, &out, overlay)? {
                println!("{}", p.display());
            }
        }
        Command::Compare { a, b, threshold, budget, window, out } => {
            let (ba, bb) = (CurveBundle::read(&a)?, CurveBundle::read(&b)?);
            let last = |c: &CurveBundle| c.steps.last().copied().unwrap_or(0);
            let budget = budget.unwrap_or(last(&ba).max(last(&bb)));
            let report = compare_report((&label(&a), &ba), (&label(&b), &bb), &CompareOptions { threshold, budget, final_window: window });
            let csv = report.to_csv();
            match out {
                Some(path) => std::fs::write(&path, &csv).map_err(|e| CliError::io(&path, e))?,
                None => print!("{csv}"),
            }
            if report.censored_only() {
                eprintln!("threshold {threshold} not reached by a median seed; speedup undefined");
                return Ok(ExitCode::from(EXIT_CENSORED as u8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
