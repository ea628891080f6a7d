//! `naer`: the command-line front end of the regime-forecasting pipeline.
//!
//! Every subcommand reads and writes GSK1 grids, CSV and JSON files. On
//! failure a single JSON object `{"error": {"kind", "message"}}` is written
//! to stderr and the process exits nonzero.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use naer_core::interpret::Method;
use naer_core::CoreError;

use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "naer", version, about = "Weather-regime labeling, forecasting, verification and attribution")]
pub struct Cli {
    /// Pipeline config (JSON). Unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed. Component seeds are derived from it by name.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Regrid a GSK1 stack bilinearly onto a regular lat-lon grid.
    Convert(ConvertArgs),
    /// Summarize a GSK1 file as JSON.
    Inspect(InspectArgs),
    /// Subtract the moving monthly climatology and keep winter days.
    Anomaly(AnomalyArgs),
    /// Label regimes by EOF projection and k-means.
    Label(LabelArgs),
    /// Teleconnection-stratified train/validation/test split.
    Split(SplitArgs),
    /// Train (or finetune) a deformable CNN for one or more lead times.
    Train(TrainArgs),
    /// Bayesian hyperparameter search over the network shape.
    Hpo(HpoArgs),
    /// Score the network and the baselines on the test partition.
    Evaluate(EvaluateArgs),
    /// Attribution map for one forecast.
    Explain(ExplainArgs),
    /// Generate a synthetic corpus with known regimes.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Target grid spacing in degrees; 5.625 gives the 32×64 grid.
    #[arg(long, default_value_t = naer_core::gridio::SPACING)]
    pub spacing: f64,
    /// Keep only these variables (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub variables: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub file: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnomalyArgs {
    /// Raw GSK1 stack (default: paths.data).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output anomaly stack (default: paths.anomalies).
    #[arg(long)]
    pub anomalies: Option<PathBuf>,
    /// CSV report of days dropped for non-finite values.
    #[arg(long)]
    pub removals: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub anomalies: Option<PathBuf>,
    /// Writes labels.csv, eofs.gsk, centroids.gsk and labeling.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Synthetic spec whose regime layout supplies the naming templates.
    #[arg(long)]
    pub synth_spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Stack whose dates are split.
    #[arg(long)]
    pub anomalies: Option<PathBuf>,
    #[arg(long)]
    pub enso: Option<PathBuf>,
    #[arg(long)]
    pub pdo: Option<PathBuf>,
    #[arg(long)]
    pub amo: Option<PathBuf>,
    /// Output plan JSON (default: paths.split).
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub anomalies: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Lead time in days, 1..=15.
    #[arg(long, conflicts_with = "leads")]
    pub lead: Option<i64>,
    /// Several lead times trained as independent runs: `1..15`, `1-15` or `1,3,5`.
    #[arg(long)]
    pub leads: Option<String>,
    /// Finetune from this checkpoint instead of training from scratch.
    #[arg(long)]
    pub pretrain_from: Option<PathBuf>,
    /// Override train.max_epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Concurrent runs for --leads (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Writes model_leadLL.gsk and log_leadLL.csv (default: paths.checkpoints).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HpoArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 5)]
    pub lead: i64,
    /// Override hpo.budget.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Override hpo.max_epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Writes trials.jsonl (resumed if present) and best.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    All,
    Decnn,
    Persistence,
    Climatology,
    Logreg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Models to score (comma separated).
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    pub model: Vec<ModelKind>,
    #[arg(long)]
    pub lead: i64,
    /// Trained network, required for `decnn`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Metrics JSON (default: stdout).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write roc.csv and diagram.csv here.
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub anomalies: Option<PathBuf>,
    /// Labels, needed for `--target true`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Initial date, YYYY-MM-DD.
    #[arg(long)]
    pub date: String,
    /// Must match the checkpoint's lead time.
    #[arg(long)]
    pub lead: i64,
    /// ig, sg or sgsq (default: interpret.method).
    #[arg(long)]
    pub method: Option<Method>,
    /// predicted, true or a class index 0..=3 (default: interpret.target).
    #[arg(long)]
    pub target: Option<String>,
    /// Writes attribution_DATE_METHOD.gsk and .csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Writes anomalies.gsk, truth.csv, enso/pdo/amo.csv and synth.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Full synthetic spec (JSON) instead of the paper-like preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub start_year: Option<i32>,
    /// Regular grid spacing in degrees instead of the preset grid.
    #[arg(long)]
    pub spacing: Option<f64>,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return match c {
                CoreError::Io(_) => "io",
                CoreError::Format(_) | CoreError::Csv(_) | CoreError::Json(_) => "format",
                CoreError::DimensionMismatch(_) => "dimension_mismatch",
                CoreError::NonMonotoneDates { .. } => "non_monotone_dates",
                CoreError::Grid(_) => "grid",
                CoreError::Extrapolation(_) => "extrapolation",
                CoreError::Coverage { .. } => "coverage",
                CoreError::InvalidArgument(_) => "invalid_argument",
                CoreError::Numerical(_) => "numerical",
                CoreError::Diverged { .. } => "diverged",
                CoreError::Tensor(_) => "tensor",
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound { "missing_file" } else { "io" };
        }
        if cause.is::<serde_json::Error>() {
            return "config";
        }
    }
    "error"
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim().to_string(), 2),
    };
    let config = match &cli.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    };
    match config.and_then(|cfg| commands::run(&cli, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), format!("{e:#}"), 1),
    }
}
