//! `rimpulse`: solve, train and evaluate entropy-regularized impulse control
//! problems from a configuration file.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 validation or convergence
//! failure, 3 usage or parse error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Core(#[from] impulse_core::Error),
    /// A check the command exists to perform did not pass.
    #[error("{0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Parse(_) => 3,
            CliError::Core(_) | CliError::Failed(_) => 2,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rimpulse", version, about = "Entropy-regularized impulse control solvers")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration; the built-in benchmark when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the model assumptions.
    Validate,
    /// Finite-difference fixed point for the randomized problem.
    SolveFd,
    /// Finite-difference fixed point for the classical problem.
    SolveClassical,
    /// TD training of the value network.
    Train {
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Monte Carlo cost of the optimal randomized policy.
    Evaluate {
        /// Comma-separated initial states.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        x0: Option<Vec<f64>>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        /// Never intervene; compare against the Feynman–Kac value.
        #[arg(long)]
        zero_intensity: bool,
    },
    /// Distance to the classical solution over diagonal `(λ, λ)` pairs.
    SweepLambda {
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        lambdas: Option<Vec<f64>>,
    },
    /// Value, intensity and jump law across volatility levels.
    SweepSigma {
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        sigmas: Option<Vec<f64>>,
    },
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::benchmark(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &g.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(l) = g.lambda1 {
        cfg.lambda.lambda1 = l;
    }
    if let Some(l) = g.lambda2 {
        cfg.lambda.lambda2 = l;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Validate => commands::validate(&cfg),
        Command::SolveFd => commands::solve_fd(&cfg),
        Command::SolveClassical => commands::solve_classical(&cfg),
        Command::Train { dry_run } => commands::train(&cfg, dry_run),
        Command::Evaluate {
            x0,
            paths,
            horizon,
            zero_intensity,
        } => {
            if let Some(x0) = x0 {
                cfg.evaluate.x0 = x0;
            }
            if let Some(p) = paths {
                cfg.evaluate.paths = p;
            }
            if let Some(h) = horizon {
                cfg.evaluate.horizon = h;
            }
            cfg.evaluate.zero_intensity |= zero_intensity;
            commands::evaluate(&cfg)
        }
        Command::SweepLambda { lambdas } => {
            if let Some(l) = lambdas {
                cfg.sweep.lambdas = l;
            }
            commands::sweep_lambda(&cfg)
        }
        Command::SweepSigma { sigmas } => {
            if let Some(s) = sigmas {
                cfg.sweep.sigmas = s;
            }
            commands::sweep_sigma(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
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
