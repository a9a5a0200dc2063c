//! `icpcov`: generate scenes, sample ICP covariances, train and evaluate the
//! covariance predictor. Every run writes `manifest.json` next to its
//! outputs; `icpcov replay` re-runs it.

mod args;
mod cmd;
mod input;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use crate::cmd::Command;
use crate::input::UsageError;

#[derive(Debug, Parser)]
#[command(name = "icpcov", version, about = "Covariance estimation for point-to-plane ICP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
