//! `lensformer`: simulate datasets, train detectors, evaluate and compare runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lensformer::metrics::StratifyKey;
use lensformer::training::Stage;

/// Errors sorted by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit 1.
    Usage(String),
    /// Failure while doing the work; exit 2.
    Runtime(String),
}

impl CliError {
    pub fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "lensformer", version, about = "Strong-lens finding with self-attention encoders")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed and LENSFORMER_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled mock-lens dataset.
    Simulate(SimulateArgs),
    /// Train a detector on a simulated dataset.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint and write the metric report.
    Eval(EvalArgs),
    /// Tabulate several evaluation reports side by side.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory (default: paths.data_dir).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub lens_fraction: Option<f64>,
    /// Number of photometric bands to keep.
    #[arg(long)]
    pub bands: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory (default: paths.data_dir).
    #[arg(short, long)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints and history (default: paths.run_dir).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Learning-rate stages as LR:EPOCHS, comma separated or repeated.
    #[arg(long, value_delimiter = ',', value_parser = parse_stage)]
    pub stages: Vec<Stage>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Start from this checkpoint's weights and architecture.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// With --resume: first stage (1-based) of the schedule to run; earlier
    /// stages count as already done.
    #[arg(long, requires = "resume", default_value_t = 1)]
    pub start_stage: usize,
    /// Disable the quarter-turn rotation augmentation.
    #[arg(long)]
    pub no_rotations: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model checkpoint (default: paths.run_dir/model.ckpt).
    #[arg(short = 'm', long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory (default: paths.data_dir).
    #[arg(short, long)]
    pub data: Option<PathBuf>,
    /// Output directory (default: paths.eval_dir).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Confusion-matrix thresholds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    /// Add a per-bin report keyed by theta_e or flux_ratio.
    #[arg(long, value_parser = parse_stratify)]
    pub stratify: Vec<StratifyKey>,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Evaluation directories or report.json files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Column to sort by, descending.
    #[arg(long, default_value = "auroc")]
    pub sort: commands::SortKey,
    /// Also write the table as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: lensformer::Error| e.to_string())
}

fn parse_stratify(s: &str) -> Result<StratifyKey, String> {
    s.parse().map_err(|e: lensformer::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
