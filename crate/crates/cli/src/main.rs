// SPDX-License-Identifier: MIT OR Apache-2.0

//! `moesteer`: fixture construction, trace collection, surrogate training,
//! steering-mask optimization and evaluation from one TOML config.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "moesteer", version, about = "Steer Mixture-of-Experts routing with sparse gate masks")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replace every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the planted-circuit model checkpoint.
    Fixture,
    /// Collect labeled routing traces from the model.
    Collect,
    /// Train the routing-logit surrogate.
    TrainSurrogate,
    /// Optimize and prune a steering mask.
    Optimize,
    /// Evaluate the mask on flip prompts and the held-out task.
    Apply {
        /// Steering amplitude, overriding `steering.alpha`.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run the λ × α grid, the τ sweep and the collapse probe.
    Sweep,
    /// Selection-frequency heatmap and utility report for the mask.
    Analyze {
        #[arg(long)]
        alpha: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Other("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    match cli.command {
        Command::Fixture => commands::fixture(&cfg),
        Command::Collect => commands::collect(&cfg),
        Command::TrainSurrogate => commands::train(&cfg),
        Command::Optimize => commands::optimize(&cfg),
        Command::Apply { alpha } | Command::Analyze { alpha } if alpha.is_some_and(|a| !a.is_finite()) => {
            Err(CliError::Format("--alpha must be finite".into()))
        }
        Command::Apply { alpha } => {
            if let Some(a) = alpha {
                cfg.steering.alpha = a;
            }
            commands::apply(&cfg)
        }
        Command::Sweep => commands::sweep(&cfg, cli.jobs),
        Command::Analyze { alpha } => {
            if let Some(a) = alpha {
                cfg.steering.alpha = a;
            }
            commands::analyze(&cfg)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
