//! `kfgum`: runs the water-tank estimation scenarios and writes plot-ready
//! CSV data plus a JSON manifest per run.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 numerical
//! failure, 3 I/O error.

mod args;
mod job;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use kfgum::EstimationError;
use thiserror::Error;

use crate::args::Cli;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Estimation(e) if e.is_numeric() => 2,
            CliError::Estimation(_) => 1,
            CliError::Io { .. } => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match job::execute(cli) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("kfgum: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
