//! `denselora`: count adapter parameters, train toy adapters, check
//! gradients and measure update density.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;
mod config;
mod exit;

#[derive(Parser, Debug)]
#[command(name = "denselora", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytic trainable-parameter counts for full fine-tuning, LoRA and DenseLoRA.
    CountParams(cmd::count::CountArgs),
    /// Attach adapters to the toy model and train them.
    Train(cmd::train::TrainArgs),
    /// Compare analytic gradients with central finite differences.
    GradCheck(cmd::grad::GradArgs),
    /// Measure how densely adapter weights moved between two checkpoints.
    Density(cmd::density::DensityArgs),
    /// Train once per rank and tabulate parameter count against accuracy.
    SweepRank(cmd::sweep::SweepArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::CountParams(a) => cmd::count::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::GradCheck(a) => cmd::grad::run(a),
        Command::Density(a) => cmd::density::run(a),
        Command::SweepRank(a) => cmd::sweep::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e) as u8)
        }
    }
}
