use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod data;
mod rad;
mod score;
mod train;
mod variance;

#[derive(Parser)]
#[command(name = "groundrl", version, about = "Verifiable rewards, toy GRPO training and attention analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score rollouts from a JSONL file and print one breakdown per line.
    Score(score::ScoreArgs),
    /// Train the toy grounded-VQA policy with GRPO.
    TrainToy(train::TrainArgs),
    /// Region attention density of attention dumps against ground-truth boxes.
    Rad(rad::RadArgs),
    /// Variance decomposition of per-rollout reward channels.
    Variance(variance::VarianceArgs),
    /// Check a dataset file record by record.
    ValidateData(data::ValidateArgs),
    /// Summary statistics of a dataset file.
    Stats(PathArg),
}

#[derive(Args)]
struct PathArg {
    /// Dataset JSONL file.
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => score::run(a),
        Command::TrainToy(a) => train::run(a),
        Command::Rad(a) => rad::run(a),
        Command::Variance(a) => variance::run(a),
        Command::ValidateData(a) => data::validate(a),
        Command::Stats(a) => data::stats(&a.path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
