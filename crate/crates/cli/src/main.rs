// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, ExperimentConfig, ReportFormat};

#[derive(Parser)]
#[command(name = "dibs", version, about = "Train and evaluate diversity-inducing information-bottleneck ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create; must not exist.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed, overriding `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FromCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint archive written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoint and config copy.
    Train(Common),
    /// Accuracy of a checkpoint under the configured input shifts.
    Generalize(FromCheckpoint),
    /// Finetune heads and decoders on the configured target with the encoder frozen.
    Transfer(FromCheckpoint),
    /// Out-of-distribution detection metrics for a checkpoint.
    Ood(FromCheckpoint),
    /// One training run per sweep value and seed.
    Sweep(Common),
    /// Summarize result tables of existing run directories.
    Report {
        /// Run directories to summarize.
        dirs: Vec<PathBuf>,
        /// Configuration whose `report_format` applies when `--format` is absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// File to write instead of standard output; must not exist.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&common.config)?.with_seed(common.seed);
    cfg.validate()?;
    println!("# configuration ({})\n{}", common.config.display(), cfg.to_toml()?);
    Ok(cfg)
}

fn announce(dir: &Path) {
    println!("run directory: {}", dir.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => announce(&commands::cmd_train(&load(&c)?, c.out.as_deref())?),
        Command::Generalize(f) => {
            announce(&commands::cmd_generalize(&load(&f.common)?, Some(&f.checkpoint), f.common.out.as_deref())?)
        }
        Command::Transfer(f) => {
            announce(&commands::cmd_transfer(&load(&f.common)?, Some(&f.checkpoint), f.common.out.as_deref())?)
        }
        Command::Ood(f) => {
            announce(&commands::cmd_ood(&load(&f.common)?, Some(&f.checkpoint), f.common.out.as_deref())?)
        }
        Command::Sweep(c) => announce(&commands::cmd_sweep(&load(&c)?, c.out.as_deref())?),
        Command::Report { dirs, config, format, out } => {
            let format = match (format, config) {
                (Some(Format::Markdown), _) => ReportFormat::Markdown,
                (Some(Format::Csv), _) => ReportFormat::Csv,
                (None, Some(path)) => ExperimentConfig::load(&path)?.report_format,
                (None, None) => ReportFormat::default(),
            };
            commands::cmd_report(&dirs, format, out.as_deref())?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
