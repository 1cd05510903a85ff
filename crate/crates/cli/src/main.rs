//! Batch front-end: preprocessing, training, inference, evaluation, statistics and ablation.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use commands::{
    AblateArgs, EvaluateArgs, FixtureArgs, InferArgs, PreprocessArgs, RerunArgs, StatsArgs, TrainArgs, Usage,
};

#[derive(Debug, Parser)]
#[command(name = "spineseg", version, about = "Diffusion-based lumbar spine MRI segmentation")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Bound on per-volume / per-slice worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the sample cache from NIfTI volumes and a metadata table.
    Preprocess(PreprocessArgs),
    /// Train a model on a sample cache.
    Train(TrainArgs),
    /// Segment slices with a checkpoint.
    Infer(InferArgs),
    /// Score predictions and build the per-modality comparison table.
    Evaluate(EvaluateArgs),
    /// Pathology-stratified significance tests with box plots.
    Stats(StatsArgs),
    /// Pre-segmentation noising-depth ablation.
    Ablate(AblateArgs),
    /// Write the synthetic NIfTI fixture.
    MakeFixture(FixtureArgs),
    /// Replay a run from its manifest.
    Rerun(RerunArgs),
}

/// 2 for bad input, 1 for internal failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(se) = cause.downcast_ref::<spineseg::Error>() {
            return if se.is_user_error() { 2 } else { 1 };
        }
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
