//! Command-line driver: argument parsing, configuration and the five
//! subcommands. `main.rs` only maps the outcome to an exit code.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfql::environments::DriftMode;
use mfql::learner::EnvMu;

#[derive(Debug, Parser)]
#[command(name = "mfql", version, about = "Two-timescale mean-field Q-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML experiment file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Parallel jobs for `sweep`.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Distribution handed to the kernel during learner steps.
    #[arg(long, global = true, value_enum)]
    pub env_mu: Option<EnvMuArg>,
    /// Drift of the benchmark kernel: `x + a` or `x + a h`.
    #[arg(long, global = true, value_enum)]
    pub drift: Option<DriftArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run the exact-operator iteration or the sample-based learner.
    Run,
    /// Run over a list of learning-rate pairs.
    Sweep,
    /// Solve for the game and control stationary points.
    Oracle,
    /// Estimate the assumption constants and the contraction constants.
    Diagnose,
    /// Iterate the scalar two-dimensional example.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnvMuArg {
    Current,
    Previous,
}

impl From<EnvMuArg> for EnvMu {
    fn from(v: EnvMuArg) -> Self {
        match v {
            EnvMuArg::Current => EnvMu::Current,
            EnvMuArg::Previous => EnvMu::Previous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriftArg {
    /// Mean `x + a`.
    Direct,
    /// Mean `x + a h`.
    Euler,
}

impl From<DriftArg> for DriftMode {
    fn from(v: DriftArg) -> Self {
        match v {
            DriftArg::Direct => DriftMode::MeanXPlusA,
            DriftArg::Euler => DriftMode::MeanXPlusAh,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(mfql::Error),
    #[error("{failed} of {total} sweep jobs failed")]
    PartialSweep { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::PartialSweep { .. } => 4,
        }
    }
}

impl From<mfql::Error> for CliError {
    fn from(e: mfql::Error) -> Self {
        use mfql::Error as E;
        match e {
            E::NonFinite { .. }
            | E::Divergence { .. }
            | E::NoConvergence { .. }
            | E::NoMinorization
            | E::AssumptionViolated(_)
            | E::EmptyWeightInterval { .. } => CliError::Numerical(e),
            other => CliError::Config(other.to_string()),
        }
    }
}

/// Loads the configuration and runs the selected subcommand.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = match &cli.common.config {
        Some(path) => config::Config::load(path)?,
        None => config::Config::default(),
    };
    let ctx = commands::Context::new(cfg, &cli.common)?;
    match cli.command {
        Command::Run => commands::run(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Oracle => commands::oracle(&ctx),
        Command::Diagnose => commands::diagnose(&ctx),
        Command::Toy => commands::toy(&ctx),
    }
}
