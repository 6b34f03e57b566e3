//! `qpfit`: sample, train, export and evaluate learned explicit MPC laws.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Acceptance(_) => 1,
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<qpfit::Error> for CliError {
    fn from(e: qpfit::Error) -> Self {
        use qpfit::Error as E;
        match e {
            E::Io(_) | E::Json(_) | E::Format(_) => CliError::Io(e.to_string()),
            E::InvalidProblem(_) | E::Dimension(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "qpfit", version, about = "Learned reduced-complexity explicit MPC pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand)]
enum Command {
    /// Condense the MPC problem into a dense QP.
    Condense(Common),
    /// Sample states and label them with the MPC law.
    Sample(Common),
    /// Train networks of every configured size.
    Train(Common),
    /// Enumerate the explicit (PWA) form of trained networks.
    Export(Common),
    /// Closed-loop simulations for oracle, implicit and explicit controllers.
    Simulate(Common),
    /// Consolidated report; exits 1 if an acceptance check fails.
    Evaluate(Common),
    /// Randomized finite-difference check of the network gradients.
    Gradcheck(Common),
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every randomized stage.
    #[arg(long)]
    seed: Option<u64>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("QPFIT_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("QPFIT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let common = match &cli.command {
        Command::Condense(c)
        | Command::Sample(c)
        | Command::Train(c)
        | Command::Export(c)
        | Command::Simulate(c)
        | Command::Evaluate(c)
        | Command::Gradcheck(c) => c,
    };
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("qpfit-out"));
    let ctx = pipeline::Context::new(cfg, out)?;
    match cli.command {
        Command::Condense(_) => pipeline::condense(&ctx),
        Command::Sample(_) => pipeline::sample(&ctx),
        Command::Train(_) => pipeline::train(&ctx),
        Command::Export(_) => pipeline::export(&ctx),
        Command::Simulate(_) => pipeline::simulate(&ctx),
        Command::Evaluate(_) => pipeline::evaluate(&ctx),
        Command::Gradcheck(_) => pipeline::gradcheck(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qpfit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
