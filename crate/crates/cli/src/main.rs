use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use eruption_cli::compare::run_comparison;
use eruption_cli::config::ExperimentConfig;
use eruption_cli::export::export_trajectories;
use eruption_cli::lemmas::{run_lemma_suite, Fault};
use eruption_cli::run::run_training;

#[derive(Parser)]
#[command(name = "eruption", version, about = "Toy tool-calling RL lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Config file; built-in micro defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Mid-train (if enabled), then run RL steps and log metrics.
    Train(Common),
    /// Run the identity and order checks over several seeds.
    CheckLemmas {
        #[command(flatten)]
        common: Common,
        /// Corrupts one gradient so the output-block identity must fail.
        #[arg(long, hide = true)]
        fault_inject: bool,
    },
    /// Matched-seed runs for each classifier weight.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weights; overrides `compare.alphas`.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Write one JSON line per logged episode of a run.
    ExportTrajectories {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// Destination file; defaults to `<run>/trajectories.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    config.apply_overrides(|name| std::env::var(name).ok())?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(o) = &common.out {
        config.output.dir = o.clone();
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let config = load(&common)?;
            let out = run_training(&config)?;
            println!(
                "{} steps, {} metric records, {} checkpoints in {}",
                out.summary.steps_completed,
                out.records.len(),
                out.summary.checkpoints.len(),
                out.dir.display()
            );
            Ok(true)
        }
        Command::CheckLemmas {
            common,
            fault_inject,
        } => {
            let config = load(&common)?;
            let report = run_lemma_suite(&config, fault_inject.then_some(Fault::OutputBlock))?;
            print!("{}", report.render_table());
            std::fs::create_dir_all(&config.output.dir)?;
            let path = config.output.dir.join("lemma_report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            let failed = report.failed_checks();
            if failed.is_empty() {
                println!("all {} entries passed", report.entries.len());
            } else {
                println!("failed: {}", failed.join(", "));
            }
            Ok(report.all_passed())
        }
        Command::Compare { common, alphas } => {
            let config = load(&common)?;
            let alphas = alphas.unwrap_or_else(|| config.compare.alphas.clone());
            let report = run_comparison(&config, &alphas, &config.output.dir)?;
            print!("{}", report.render_table());
            Ok(true)
        }
        Command::ExportTrajectories { run, out } => {
            let (dest, n) = export_trajectories(&run, out.as_deref())?;
            println!("{n} episodes written to {}", dest.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
