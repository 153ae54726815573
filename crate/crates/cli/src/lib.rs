//! Command-line front end for `cqnet`: experiment runs from TOML configs, the
//! property verification suite and checkpoint inspection.

// `!(x <= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod experiments;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::{cmd_inspect, cmd_run, cmd_verify, RunOptions};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "CQNET_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Runtime(_) => 1,
            Self::Config(_) => 2,
            Self::Verify(_) => 3,
        }
    }
}

impl From<cqnet::Error> for CliError {
    fn from(e: cqnet::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Fast,
    Full,
}

#[derive(Debug, Parser)]
#[command(
    name = "cqnet",
    version,
    about = "CQ networks: experiments, verification and checkpoints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Control only: roll out the CQ-only baseline instead of training.
        #[arg(long)]
        baseline: bool,
    },
    /// Run the property suites and print a pass/fail table.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: LevelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rescales every CQ stepsize to `s/λ` in the nonexpansiveness suite.
        #[arg(long, hide = true)]
        step_scale: Option<f64>,
    },
    /// Print the architecture and certificates stored in a checkpoint.
    Inspect {
        /// Checkpoint file.
        checkpoint: PathBuf,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool may already exist when the library is driven from tests.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Run {
            config,
            out,
            seed,
            baseline,
        } => cmd_run(&config, &RunOptions { out, seed, baseline }).map(|s| {
            println!("{}", serde_json::to_string_pretty(&s).unwrap_or_default());
        }),
        Command::Verify {
            level,
            seed,
            step_scale,
        } => cmd_verify(level, seed, step_scale),
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint).map(|text| print!("{text}")),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
