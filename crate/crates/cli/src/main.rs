//! `axcv` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
//! 4 equivalence-check failure.

mod commands;
mod config;
mod error;
mod report;

use std::process::ExitCode;

use clap::Parser;

use config::{resolve, Cli, Command, FileConfig};
use error::CliResult;

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let cfg = resolve(cli.command.name(), cli.command.opts(), file)?;
    match cli.command {
        Command::Stats(_) => commands::stats(&cfg),
        Command::ConvError(_) => commands::conv_error(&cfg),
        Command::SystolicCheck(_) => commands::systolic_check(&cfg),
        Command::Infer(_) => commands::infer(&cfg),
        Command::Sweep(_) => commands::sweep(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("axcv: {e}");
            e.exit_code()
        }
    }
}
