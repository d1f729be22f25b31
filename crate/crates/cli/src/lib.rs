//! Command-line harness for memiml experiments: `train`, `eval`, `sweep`
//! and `diagnose`.

pub mod config;
pub mod data;
pub mod diagnose;
pub mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use run::SweepAxis;

#[derive(Debug, Parser)]
#[command(name = "memiml", version, about = "Memory-imitation meta-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train and write metrics.csv, checkpoint.bin and config.txt.
    Train(RunArgs),
    /// Meta-test a checkpoint on the configured test tasks.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to checkpoint.bin in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds shared by every value; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare loss-gap curves of two or more runs.
    Diagnose {
        #[arg(required = true, num_args = 2..)]
        metrics: Vec<PathBuf>,
        /// Output directory; defaults to `diagnose` under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["none", "no-similarity-search", "no-value-predictor", "no-local-adaptation"])]
    pub ablation: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub store_ratio: Option<f64>,
    #[arg(long)]
    pub neighbors: Option<usize>,
    #[arg(long, value_parser = ["on", "off"])]
    pub second_order: Option<String>,
    /// Output root; the run directory is `<out>/<run.name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run name.
    #[arg(long)]
    pub name: Option<String>,
    /// Number of outer steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

impl RunArgs {
    /// Defaults, then the config file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("meta.ablation", self.ablation.clone()),
            ("meta.beta", self.beta.map(|v| v.to_string())),
            ("meta.store_ratio", self.store_ratio.map(|v| v.to_string())),
            ("meta.n_neighbors", self.neighbors.map(|v| v.to_string())),
            ("meta.second_order", self.second_order.clone()),
            ("run.out", self.out.as_ref().map(|p| p.display().to_string())),
            ("run.name", self.name.clone()),
            ("run.steps", self.steps.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs a parsed command; the exit code is nonzero unless all requested
/// work completed.
pub fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let outcome = run::train(&cfg)?;
            let last = outcome.metrics.rows.last();
            println!(
                "trained {} steps into {}{}",
                outcome.learner.step(),
                outcome.dir.display(),
                last.map(|r| format!(" (last {} gap {:.4})", r.phase.as_str(), r.gap))
                    .unwrap_or_default()
            );
        }
        Command::Eval { run: args, checkpoint } => {
            let cfg = args.resolve()?;
            let path = checkpoint.unwrap_or_else(|| cfg.run_dir().join(run::CHECKPOINT_FILE));
            let report = run::eval(&cfg, &path)?;
            print!("{}", report.summary);
        }
        Command::Sweep { run: args, axis, values, seeds } => {
            let cfg = args.resolve()?;
            let rows = run::sweep(&cfg, axis, &values, &seeds)?;
            let mut failed = 0;
            for row in &rows {
                match &row.result {
                    Ok(m) => println!("{} = {}: gap {:.4}, metric {:.4}", axis.as_str(), row.value, m.gap, m.metric),
                    Err(e) => {
                        failed += 1;
                        println!("{} = {}: FAILED ({e})", axis.as_str(), row.value);
                    }
                }
            }
            println!("table written to {}", cfg.run_dir().join(run::SWEEP_FILE).display());
            if failed > 0 {
                eprintln!("error: {failed} of {} sweep cells failed", rows.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Diagnose { metrics, out } => {
            let out = out.unwrap_or_else(|| ExperimentConfig::default().run.out.join("diagnose"));
            let summary = diagnose::diagnose(&metrics, &out)?;
            for s in &summary {
                println!(
                    "{:<24} {:<5} terminal gap {:>10.5}  peak gap {:>10.5}  ({} points)",
                    s.label,
                    s.phase.as_str(),
                    s.terminal_gap,
                    s.peak_gap,
                    s.points
                );
            }
            println!("report written to {}", out.join(diagnose::REPORT_FILE).display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
