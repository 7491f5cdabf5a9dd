//! Command-line front end for the aura alignment toolkit.
//!
//! Exit codes: 0 success, 2 configuration and usage problems, 3 numeric
//! failures during training or evaluation, 4 malformed or mismatched data.

use aura_core::Error;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod data;

use commands::{compare, eval, preprocess, train};

#[derive(Parser)]
#[command(name = "aura", version, about = "wearable sensor alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a dataset directory from raw recordings or the synthetic benchmark.
    Preprocess(preprocess::PreprocessArgs),
    /// Align an encoder pair with contrastive training.
    Train(train::TrainArgs),
    /// Score a trained checkpoint on retrieval or activity recognition.
    Eval(eval::EvalArgs),
    /// Train both encoder architectures and tabulate them side by side.
    Compare(compare::CompareArgs),
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Format { .. }
        | Error::Mismatch(_)
        | Error::ShapeMismatch { .. }
        | Error::Lookup(_) => 4,
        Error::NumericFailure { .. }
        | Error::Training { .. }
        | Error::NonScalarObjective { .. } => 3,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Preprocess(args) => preprocess::run(args),
        Cmd::Train(args) => train::run(args),
        Cmd::Eval(args) => eval::run(args),
        Cmd::Compare(args) => compare::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
