//! `occugrasp` command-line tool.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BenchArgs, EvalArgs, GenDataArgs, InferArgs, TrainArgs};

/// Local occupancy-enhanced grasp pose estimation on synthetic desk scenes.
///
/// Exit codes: 0 success, 1 other failure, 2 bad flags or config, 3 I/O
/// failure, 4 training diverged, 5 checkpoint architecture mismatch,
/// 6 malformed input cloud.
#[derive(Debug, Parser)]
#[command(name = "occugrasp", version)]
struct Cli {
    /// Cap on worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes with clouds and ground-truth occupancy.
    GenData(GenDataArgs),
    /// Train a model and write a resumable checkpoint with a JSONL loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a metrics CSV.
    Eval(EvalArgs),
    /// Predict grasp poses and local occupancy for one cloud.
    Infer(InferArgs),
    /// Compare occupancy strategies (timing, IOU, oracle AP) on a dataset.
    Bench(BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
