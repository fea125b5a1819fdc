use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "layerfuse", version, about = "Manifold-aligned layer merging for toy transformers")]
#[command(args_override_self = true)]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` file (or a resolved-config.json); flags override it.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Create a model and train it on a toy task.
    InitTrain(InitTrainArgs),
    /// Dump per-layer activations for the task's capture inputs.
    Capture(CaptureArgs),
    /// Similarity matrix of the layers in an activation dump.
    Similarity(SimilarityArgs),
    /// Remove layers by merging or pruning.
    Compress(CompressArgs),
    /// Cross-entropy and accuracy on the task's evaluation stream.
    Evaluate(EvaluateArgs),
    /// Evaluate several methods over several compression ratios.
    Sweep(SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::InitTrain(_) => "init-train",
            Command::Capture(_) => "capture",
            Command::Similarity(_) => "similarity",
            Command::Compress(_) => "compress",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TaskArgs {
    /// markov-chain or modular-addition
    #[arg(long, default_value = "markov-chain")]
    pub task: String,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct CaptureDataArgs {
    #[arg(long, default_value_t = 128)]
    pub n_inputs: usize,
    /// last or mean
    #[arg(long, default_value = "last")]
    pub pool: String,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ManifoldArgs {
    /// `auto` (median heuristic) or a fixed bandwidth
    #[arg(long, default_value = "auto")]
    pub sigma: String,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub t: f64,
    /// nmi, cosine, euclidean-rbf or mahalanobis-rbf
    #[arg(long, default_value = "nmi")]
    pub measure: String,
    /// Relative ridge factor (times trace/d) for covariance log-determinants.
    #[arg(long, default_value_t = 1e-6)]
    pub ridge: f64,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct InitTrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 32)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct CaptureArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: CaptureDataArgs,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SimilarityArgs {
    #[arg(long)]
    pub activations: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub manifold: ManifoldArgs,
    /// Also score the post-embedding activations (layer 0).
    #[arg(long)]
    pub include_embedding: bool,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: CaptureDataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub manifold: ManifoldArgs,
    /// mka, reverse or fixed:<lambda>
    #[arg(long, default_value = "mka")]
    pub method: String,
    /// Layers to keep (default: one fewer than the model has).
    #[arg(long, conflicts_with = "tau")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_layers: Option<usize>,
    /// Merge while the best adjacent pair scores at least this much (mka only).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// nmi, grid:<steps> or fixed:<alpha>
    #[arg(long, default_value = "nmi")]
    pub alpha_mode: String,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// final-layer-embedding or task-labels
    #[arg(long, default_value = "final-layer-embedding")]
    pub target_mode: String,
    /// none, int8 or int4
    #[arg(long, default_value = "none")]
    pub quant: String,
    #[arg(long)]
    pub no_iterative: bool,
    #[arg(long)]
    pub no_recompute: bool,
    #[arg(long, default_value_t = 16)]
    pub eval_batches: usize,
    /// Estimate the second-order loss bound (slow).
    #[arg(long)]
    pub loss_impact: bool,
    #[arg(long, default_value_t = 8)]
    pub impact_sequences: usize,
    #[arg(long, default_value_t = 10)]
    pub impact_iters: usize,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 16)]
    pub n_batches: usize,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: CaptureDataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub manifold: ManifoldArgs,
    /// Comma-separated methods (mka, mka-noniter, reverse, fixed:<lambda>).
    #[arg(long, default_value = "mka,reverse")]
    pub methods: String,
    /// Comma-separated compression ratios in [0,1).
    #[arg(long, default_value = "0,0.25,0.5")]
    pub ratios: String,
    #[arg(long, default_value = "nmi")]
    pub alpha_mode: String,
    #[arg(long, default_value_t = 16)]
    pub eval_batches: usize,
}
