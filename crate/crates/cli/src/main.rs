//! `vs30`: synthetic corpora, fold planning, training, evaluation and
//! cross-validation reports.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vs30_core::{CoreError, ErrorClass};

/// Invalid invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "vs30", version, about = "Vs30 estimation from three-component accelerograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (waveforms plus manifest files).
    Synth(SynthArgs),
    /// Assign labelled stations to cross-validation folds.
    Split(SplitArgs),
    /// Single-phase training on one fold.
    Train(TrainArgs),
    /// Epicentre pretraining of the encoder.
    Pretrain(PretrainArgs),
    /// Fine-tune a fresh head on top of a pretrained encoder.
    TransferTrain(TransferArgs),
    /// Score a checkpoint on its fold's test stations.
    Evaluate(EvaluateArgs),
    /// Predict vs30 for one record.
    Predict(PredictArgs),
    /// Merge per-fold evaluation reports into a cross-validation summary.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of stations.
    #[arg(long)]
    stations: usize,
    /// Number of events.
    #[arg(long)]
    events: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw site classes from a C-heavy mix instead of log-uniform vs30.
    #[arg(long)]
    class_skew: bool,
    /// Only record station-event pairs within this epicentral distance.
    #[arg(long)]
    cutoff_km: Option<f64>,
    /// Record length in seconds.
    #[arg(long, default_value_t = 90.0)]
    record_s: f64,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Corpus directory or its manifest.csv.
    #[arg(long)]
    manifest: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output fold file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration with [data], [model] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Corpus directory or manifest.csv (overrides data.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Fold file (overrides data.folds).
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fold whose test stations are held out.
    #[arg(long)]
    fold: usize,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Hold out this fold's test stations; all records are used when absent.
    #[arg(long)]
    fold: Option<usize>,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fold whose test stations are held out.
    #[arg(long)]
    fold: usize,
    /// Pretraining checkpoint (overrides data.pretrained).
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory or manifest.csv.
    #[arg(long)]
    manifest: PathBuf,
    /// Fold to score; defaults to the checkpoint's fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Fold file; defaults to the plan stored in the checkpoint.
    #[arg(long)]
    folds: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint to use.
    #[arg(long)]
    checkpoint: PathBuf,
    /// SM3C waveform file.
    #[arg(long)]
    record: PathBuf,
    /// Station latitude in degrees.
    #[arg(long, allow_negative_numbers = true)]
    lat: f64,
    /// Station longitude in degrees.
    #[arg(long, allow_negative_numbers = true)]
    lon: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation output directories, one per fold.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output directory for the merged report.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CoreError>().map(CoreError::class) {
        Some(ErrorClass::Usage) => 2,
        Some(ErrorClass::Numeric) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match commands::threads() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a, threads),
        Command::Pretrain(a) => commands::pretrain(a, threads),
        Command::TransferTrain(a) => commands::transfer_train(a, threads),
        Command::Evaluate(a) => commands::evaluate(a, threads),
        Command::Predict(a) => commands::predict(a, threads),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
