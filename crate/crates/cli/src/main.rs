//! `wasserball`: batch experiments over the wasserball library.

mod commands;
mod options;

use std::fmt::Display;
use std::process::ExitCode;

use clap::Parser;

/// Why a command stopped. Usage problems exit with 1, everything else with 2.
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl Display) -> Self {
        Failure::Usage(msg.to_string())
    }
}

impl From<wasserball::Error> for Failure {
    fn from(e: wasserball::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match options::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version are not errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
