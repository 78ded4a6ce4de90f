//! Batch interface: CSV ingestion, JSON configuration, and the `eda`, `fit`,
//! `predict`, `diagnose` and `simulate` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod table;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_diagnose, cmd_eda, cmd_fit, cmd_predict, cmd_simulate};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "dbps", version, about = "Stacked Bayesian spatial regression on data partitions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Variograms, fits and the derived model grid.
    Eda,
    /// Fit the stacked model and write the artifact and weights.
    Fit,
    /// Predictive summaries at new locations.
    Predict,
    /// Monte Carlo KL upper bound against a reference model.
    Diagnose,
    /// Write a synthetic dataset and its generating parameters.
    Simulate,
}

/// Load the config named by `cli` and apply flag overrides.
pub fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = &cli.output {
        cfg.output = Some(o.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    Ok(cfg)
}

/// Run one command on a pool of `cfg.workers` threads.
pub fn run_command(command: Command, cfg: &RunConfig) -> CliResult<()> {
    let workers = match cfg.workers {
        Some(0) => return Err(CliError::Config("workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Eda => cmd_eda(cfg),
        Command::Fit => cmd_fit(cfg),
        Command::Predict => cmd_predict(cfg),
        Command::Diagnose => cmd_diagnose(cfg),
        Command::Simulate => cmd_simulate(cfg),
    })
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = effective_config(cli)?;
    run_command(cli.command, &cfg)
}
