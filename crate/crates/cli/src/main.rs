//! `scg`: train, verify, analyze and complete modular equivariant autoencoders.
//!
//! Exit codes: 0 success, 1 runtime failure (or a failed gradient check),
//! 2 usage error (bad flags, unknown or invalid config keys).

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "scg", version, about = "Modular equivariant autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoints, loss CSV and the materialized config.
    Train {
        config: PathBuf,
        /// Train for 40000 steps instead of the configured count.
        #[arg(long)]
        paper_steps: bool,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Finite-difference check of every loss gradient on a small instance.
    Gradcheck { config: PathBuf },
    /// Kernel grid, tuning curves, selectivity table, reconstructions, sweeps.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a completion map for a module group (or `all`) and report metrics.
    Complete {
        checkpoint: PathBuf,
        group: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the unconstrained baseline and the constrained model; compare.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        paper_steps: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
}

/// Marks errors that should exit with status 2.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(path: Option<&Path>, out: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            RunConfig::from_text(&text)
                .with_context(|| format!("invalid config {}", p.display()))
                .map_err(UsageError)?
        }
        None => RunConfig::default().materialized()?,
    };
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SCG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(anyhow::anyhow!("SCG_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            config,
            paper_steps,
            resume,
            out,
            quiet,
        } => {
            let cfg = commands::with_paper_steps(load_config(Some(&config), out)?, paper_steps);
            commands::run_train(&cfg, resume.as_deref(), quiet)?;
        }
        Command::Gradcheck { config } => {
            let cfg = load_config(Some(&config), None)?;
            if !commands::run_gradcheck(&cfg)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Analyze { checkpoint, config, out } => {
            let cfg = load_config(config.as_deref(), out)?;
            commands::run_analyze(&cfg, &checkpoint)?;
        }
        Command::Complete {
            checkpoint,
            group,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref(), out)?;
            commands::run_complete(&cfg, &checkpoint, &group)?;
        }
        Command::Ablate {
            config,
            paper_steps,
            out,
            quiet,
        } => {
            let cfg = commands::with_paper_steps(load_config(Some(&config), out)?, paper_steps);
            commands::run_ablate(&cfg, quiet)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
