//! Batch experiment driver: each subcommand reads one JSON experiment file
//! and writes `report.json` plus CSV tables into the output directory.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use kolmolab::{Error, ErrorKind};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const SEED_ENV: &str = "KOLMOLAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    KernelNorms,
    Embed,
    Mc,
    Solve,
    Degiorgi,
    Maxprinciple,
}

#[derive(Debug, Parser)]
#[command(name = "kolmolab", version, about = "Numerical laboratory for hypoelliptic Kolmogorov operators")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Experiment file (JSON).
    pub config: PathBuf,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_VALIDATION,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Validation => EXIT_VALIDATION,
                ErrorKind::Numerical => EXIT_NUMERICAL,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::from(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::from(e))
    }
}
