//! `dynamo`: solve, train, evaluate and sweep mesh-refinement policies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] dynamo_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 config, 2 solver failure, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        use dynamo_core::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 3,
            CliError::Core(e) if e.is_solver_failure() => 2,
            CliError::Core(E::NonFiniteLoss(_)) => 2,
            CliError::Core(E::Io(_) | E::Csv(_) | E::Checkpoint(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dynamo", version, about = "Reinforcement-learned adaptive mesh refinement for DG solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fixed-mesh simulation with VTK snapshots and conserved integrals.
    Solve {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// PPO training; writes checkpoints and metrics.csv.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// continue from latest.ckpt in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate one policy on one or more problem instances.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// α used by a learned policy (overrides eval.parameters)
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Sweep a policy parameter on one instance.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a canonical two-dimensional Riemann configuration.
    Riemann {
        #[arg(long)]
        case: u32,
        #[arg(short, long)]
        out: PathBuf,
        /// optional config supplying policy and solver settings
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { config, out } => commands::solve(&config::load(&config)?, &out),
        Command::Train { config, out, resume } => commands::train(&config::load(&config)?, &out, resume),
        Command::Eval {
            config,
            out,
            checkpoint,
            alpha,
        } => {
            let mut cfg = config::load(&config)?;
            commands::apply_overrides(&mut cfg, checkpoint, alpha)?;
            commands::eval(&cfg, &out, false)
        }
        Command::Sweep { config, out, checkpoint } => {
            let mut cfg = config::load(&config)?;
            commands::apply_overrides(&mut cfg, checkpoint, None)?;
            commands::eval(&cfg, &out, true)
        }
        Command::Riemann { case, out, config } => {
            let cfg = match config {
                Some(p) => Some(config::load(&p)?),
                None => None,
            };
            commands::riemann(case, cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
