//! `hfb`: cost tables, training runs, Strassen checks and the sensitivity
//! and drift experiments.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or input error, 3 runtime
//! failure.

mod cmd;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "hfb",
    version,
    about = "Hybrid filter bank and StrassenNets toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Operation counts, model size, energy and throughput of a network.
    Cost(cmd::cost::CostArgs),
    /// Three-phase training from a TOML config.
    Train(cmd::train::TrainArgs),
    /// Exactness of the 7- and 8-product SPNs and the 6-product search.
    VerifyStrassen(cmd::verify::VerifyArgs),
    /// SPN reconstruction loss against hidden width for a fixed filter.
    Sensitivity(cmd::sensitivity::SensitivityArgs),
    /// Full-precision filter movement between two checkpoints.
    Drift(cmd::drift::DriftArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Cost(a) => cmd::cost::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::VerifyStrassen(a) => cmd::verify::run(a),
        Command::Sensitivity(a) => cmd::sensitivity::run(a),
        Command::Drift(a) => cmd::drift::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hfb: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
