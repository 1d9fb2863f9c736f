mod commands;
mod eval;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use discover_core::fusion_train::Stage;
use discover_core::synthgen::Split;

/// Ordinal grading of OCTA volumes: synthetic data, preprocessing,
/// training, inference, evaluation and reports.
#[derive(Parser, Debug)]
#[command(name = "discover", version)]
struct Cli {
    /// Log filter, e.g. `info` or `discover_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with a split manifest.
    Synth(SynthArgs),
    /// Stack, mask, flatten and crop bundles.
    Preprocess(PreprocessArgs),
    /// Train one stage or the configured schedule.
    Train(TrainArgs),
    /// Predict with a checkpoint.
    Infer(InferArgs),
    /// ROC analysis of saved predictions.
    Eval(EvalArgs),
    /// Write the PNG and HTML report for one bundle.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_per_grade: usize,
    /// `XxYxZ`, e.g. `64x96x64`.
    #[arg(long, default_value = "64x96x64")]
    pub dims: String,
    /// Falls back to DISCOVER_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Dataset directory with a manifest, or one bundle directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML or JSON run configuration; its `preprocess` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `preprocess.y0` (default 8).
    #[arg(long)]
    pub y0: Option<usize>,
    /// Overrides `preprocess.y1` (default 56).
    #[arg(long)]
    pub y1: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with `manifest.json`; bundles raw or preprocessed.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML or JSON run configuration. Defaults: phi 4, three backbones,
    /// Adam lr 1e-3 decayed 0.99 per epoch, patience 10, batch 8.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single phase to run; without it the configured schedule runs.
    #[arg(long, value_parser = parse_stage)]
    pub stage: Option<Stage>,
    /// Checkpoint to continue from; required for `--stage c2`.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// One bundle directory, or a dataset directory with a manifest.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restricts a dataset to one split.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Prediction JSON to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Prediction JSON from `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Manifest holding the grades.
    #[arg(long)]
    pub labels: PathBuf,
    /// Second prediction file for paired comparisons.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Report JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// One bundle directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: discover_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: discover_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => eval::run(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
