//! Command line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "dance",
    version,
    about = "Point cloud completion by per-face candidate denoising"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus its history CSV.
    Train(TrainArgs),
    /// Complete one partial cloud with a trained model.
    Complete(CompleteArgs),
    /// Score a model on a dataset, or one predicted cloud against its ground truth.
    Eval(EvalArgs),
    /// Evaluate under Gaussian input noise at several levels.
    NoiseBench(NoiseBenchArgs),
    /// Evaluate at several inference grid resolutions and input sizes.
    DensityBench(DensityBenchArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the subcommand's random streams.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory [default: paths.data].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shapes per category [default: data.n_per_class].
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// Comma-separated category names.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    /// Points per complete shape.
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory [default: paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write [default: paths.checkpoint].
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// History CSV to write [default: paths.history].
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Training epochs [default: train.epochs].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

/// Inference settings shared by the model-driven subcommands. Settings not
/// given here come from `--config` when present, otherwise from the
/// checkpoint.
#[derive(Debug, Args)]
pub struct InferenceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to read [default: paths.checkpoint].
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Opacity threshold of the output filter.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Inference grid resolution.
    #[arg(long)]
    pub r: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Partial cloud (.xyz or .ply).
    #[arg(long)]
    pub input: PathBuf,
    /// Input plus completed points (.ply or .xyz).
    #[arg(long)]
    pub out: PathBuf,
    /// Completed points alone [default: `<out stem>_out.<ext>`].
    #[arg(long)]
    pub out_points: Option<PathBuf>,
    /// Write ascii rather than binary PLY.
    #[arg(long)]
    pub ascii: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Dataset directory to complete and score [default: paths.data].
    #[arg(long, conflicts_with_all = ["pred", "gt"])]
    pub data: Option<PathBuf>,
    /// Predicted cloud to score directly, without a model.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Ground truth cloud for `--pred`.
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Per-sample CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Aggregate CSV [default: `<out stem>_summary.csv`].
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Multiply Chamfer columns by 1000.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
pub struct NoiseBenchArgs {
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Dataset directory [default: paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output CSV, one row per noise level.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated noise standard deviations.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Multiply Chamfer columns by 1000.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Args)]
pub struct DensityBenchArgs {
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// Dataset directory [default: paths.data].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output CSV, one row per (resolution, size) pair.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated inference grid resolutions.
    #[arg(long, value_delimiter = ',')]
    pub r_values: Option<Vec<usize>>,
    /// Comma-separated input sizes.
    #[arg(long, value_delimiter = ',')]
    pub n_values: Option<Vec<usize>>,
    /// Multiply Chamfer columns by 1000.
    #[arg(long)]
    pub paper_scale: bool,
}
