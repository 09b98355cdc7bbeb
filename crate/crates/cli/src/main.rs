//! `ssc`: command-line driver for the scene completion pipeline.
//!
//! Subcommands: `run` (forward pass, losses, metrics), `check` (named
//! invariant suite), `eval` (metrics from prediction and ground-truth grids),
//! `export` (argmax a logits grid into labels), `gen` (write a synthetic
//! scene bundle).
//!
//! Exit codes: 0 success, 1 invariant failure (the failing property is
//! named), 2 usage errors and missing/unreadable input files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod checks;
mod runner;

#[derive(Parser)]
#[command(name = "ssc", version, about = "semantic scene completion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward pass on a synthetic scene; writes logits, label grids and a report.
    Run {
        /// Config file; omit for built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite; exits 1 naming the first failing property.
    Check {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Inject a deliberately wrong analytic gradient; the gradient
        /// property must then fail (negative control).
        #[arg(long)]
        negative_control: bool,
    },
    /// Metrics from a prediction and a ground-truth label grid.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Total class count including `empty`.
        #[arg(long, default_value_t = 20)]
        classes: usize,
    },
    /// Argmax a logits grid into a label grid.
    Export {
        /// Input logits grid.
        #[arg(long)]
        pred: PathBuf,
        /// Output label grid path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic scene bundle (labels, calibration, depth).
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure modes that map onto the documented exit codes.
pub enum AppError {
    /// Bad invocation or unreadable input: exit 2.
    Usage(String),
    /// A named invariant failed: exit 1.
    Invariant(String),
    /// Everything else (I/O mid-run, internal errors): exit 1.
    Other(String),
}

impl AppError {
    fn usage(msg: impl Into<String>) -> Self {
        AppError::Usage(msg.into())
    }
}

impl From<ssc_core::CoreError> for AppError {
    fn from(e: ssc_core::CoreError) -> Self {
        AppError::Other(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;

/// Read an input file, mapping absence/unreadability to a usage error.
pub fn read_input(path: &Path) -> AppResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::usage(format!("cannot read {}: {e}", path.display())))
}

pub fn load_config(path: Option<&Path>) -> AppResult<ssc_core::config::RunConfig> {
    match path {
        None => Ok(ssc_core::config::RunConfig::default()),
        Some(p) => {
            let text = String::from_utf8(read_input(p)?)
                .map_err(|_| AppError::usage(format!("{} is not UTF-8", p.display())))?;
            ssc_core::config::parse_run_config(&text)
                .map_err(|e| AppError::usage(format!("{}: {e}", p.display())))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => runner::run(config.as_deref(), seed, out.as_deref()),
        Command::Check {
            config,
            seed,
            negative_control,
        } => checks::check(config.as_deref(), seed, negative_control),
        Command::Eval { pred, gt, classes } => runner::eval(&pred, &gt, classes),
        Command::Export { pred, out } => runner::export(&pred, &out),
        Command::Gen { config, seed, out } => runner::gen(config.as_deref(), seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Invariant(name)) => {
            eprintln!("invariant failure: {name}");
            ExitCode::from(1)
        }
        Err(AppError::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
