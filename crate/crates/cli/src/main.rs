//! `mosig`: ingest skeleton data, train signature encoders, build indexes,
//! and run retrieval queries and evaluations.

mod data;
mod learn;
mod retrieve;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use motion_signature::par::{self, Parallelism};
use motion_signature::Error;

#[derive(Parser)]
#[command(name = "mosig", version, about = "Motion signature learning and retrieval")]
struct Cli {
    /// Worker threads; 1 runs everything on the main thread.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset (sequences, topology, manifest).
    Synth(data::SynthArgs),
    /// Validate, optionally bone-normalize, and copy a dataset.
    Ingest(data::IngestArgs),
    /// Add speed and joint-dropout variants of every sequence.
    Augment(data::AugmentArgs),
    /// Train a signature encoder.
    Train(learn::TrainArgs),
    /// Encode a manifest split into an embedding index.
    Index(retrieve::IndexArgs),
    /// Retrieve the nearest indexed sequences for one sequence file.
    Query(retrieve::QueryArgs),
    /// Retrieval report, PR curve and latency over a labeled split.
    Evaluate(retrieve::EvaluateArgs),
    /// Sub-motion encoder training and window queries.
    #[command(subcommand)]
    Submotion(SubmotionCommand),
}

#[derive(Subcommand)]
enum SubmotionCommand {
    /// Train a window encoder against a frozen full-sequence encoder.
    Train(learn::SubmotionTrainArgs),
    /// Query a full-sequence index with a window of a sequence file.
    Query(retrieve::SubmotionQueryArgs),
}

/// Flags shared by commands that consume a dataset.
#[derive(Args, Clone)]
pub struct DatasetArgs {
    /// Tab-separated manifest file.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Topology file (`#topology v1`).
    #[arg(long)]
    pub topology: PathBuf,
}

fn execute(cli: Cli) -> motion_signature::Result<()> {
    let mode = match cli.threads {
        Some(0) => return Err(Error::Argument("--threads must be at least 1".into())),
        Some(1) => Parallelism::Sequential,
        Some(n) => {
            par::init_threads(n);
            Parallelism::Parallel
        }
        None => Parallelism::default(),
    };
    let ctx = run::Context { mode, threads: cli.threads };
    match cli.command {
        Command::Synth(a) => data::synth(&ctx, a),
        Command::Ingest(a) => data::ingest(&ctx, a),
        Command::Augment(a) => data::augment(&ctx, a),
        Command::Train(a) => learn::train(&ctx, a),
        Command::Index(a) => retrieve::index(&ctx, a),
        Command::Query(a) => retrieve::query(&ctx, a),
        Command::Evaluate(a) => retrieve::evaluate(&ctx, a),
        Command::Submotion(SubmotionCommand::Train(a)) => learn::submotion_train(&ctx, a),
        Command::Submotion(SubmotionCommand::Query(a)) => retrieve::submotion_query(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR: usage: {first}");
            eprint!("{text}");
            return ExitCode::from(1);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
