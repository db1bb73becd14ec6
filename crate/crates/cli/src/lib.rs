//! Command-line pipeline: simulate, balance, fit, estimate, diagnose, report.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

mod commands;
pub mod config;
mod output;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<rdstrata::Error> for CliError {
    fn from(e: rdstrata::Error) -> Self {
        use rdstrata::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Lookup { .. } => CliError::Config(msg),
            E::Io(_) | E::Csv(_) | E::Ingest(_) => CliError::MissingInput(msg),
            E::Domain(_)
            | E::Precondition(_)
            | E::Estimation(_)
            | E::Summary(_)
            | E::Numerical(_) => CliError::Numerical(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rdstrata",
    version,
    about = "Principal stratification for fuzzy RD designs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "rdstrata.toml")]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Maximum number of concurrent chains.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate,
    /// Covariate balance across the bandwidth grid.
    Balance,
    /// Run the strata-model chains for every bandwidth.
    Fit,
    /// Summarize fitted draws into causal estimands.
    Estimate,
    /// Convergence diagnostics and posterior predictive checks.
    Diagnose,
    /// Collect existing outputs into a Markdown report.
    Report,
}

/// Runs one command; messages for the user go to stderr.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("output_dir: not set and no --out given".into()))?;
    let config_dir = cli
        .config
        .parent()
        .map(|p| {
            if p.as_os_str().is_empty() {
                PathBuf::from(".")
            } else {
                p.to_path_buf()
            }
        })
        .unwrap_or_else(|| PathBuf::from("."));
    let ctx = commands::Context::new(cfg, config_dir, out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("jobs: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Balance => commands::balance(&ctx),
        Command::Fit => commands::fit(&ctx),
        Command::Estimate => commands::estimate(&ctx),
        Command::Diagnose => commands::diagnose(&ctx),
        Command::Report => commands::report(&ctx),
    })
}
