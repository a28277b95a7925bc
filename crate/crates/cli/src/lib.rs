//! Command-line front end: training, evaluation, thematic maps, sweeps and sample dumps.

use std::fmt;
use std::io;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod ppm;

/// Exit code for configuration and validation failures.
pub const EXIT_CONFIG: u8 = 2;
/// Exit code for numerical failures (non-finite loss or gradient, failed gradient checks).
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<tpo_core::Error> for CliError {
    fn from(e: tpo_core::Error) -> Self {
        match e {
            tpo_core::Error::Numerical(_) => Self::numerical(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "tpo", version, about = "TPO hyperspectral classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the configured split and write checkpoint, report and loss trace.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the test pixels of the configured split.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        weights: PathBuf,
    },
    /// Classify every pixel and write a colour PPM.
    Map {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        weights: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train and evaluate once per value of the configured sweep axis.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Dump the training samples of the configured split.
    Extract {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

/// Worker count from `TPO_THREADS`; unset means one.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("TPO_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::config(format!(
                "TPO_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = threads_from_env()?;
    match cli.command {
        Command::Train { config } => commands::train(&config, threads),
        Command::Eval { config, weights } => commands::eval(&config, &weights, threads),
        Command::Map {
            config,
            weights,
            output,
        } => commands::map(&config, &weights, &output, threads),
        Command::Sweep { config } => commands::sweep(&config, threads),
        Command::Extract { config, output } => commands::extract(&config, &output),
        Command::Gradcheck { seeds } => commands::gradcheck(seeds),
    }
}
