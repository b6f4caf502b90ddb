use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use swimdiff::eval::ProbeMode;
use swimdiff::trainer::Ablation;

#[derive(Debug, Parser)]
#[command(name = "swimdiff", version, about = "Scene-wide matching contrastive pretraining with a diffusion constraint")]
pub struct Cli {
    /// Root for run directories that are not given an explicit --out.
    #[arg(long, env = "SWIMDIFF_RUNS_DIR", default_value = "runs", global = true)]
    pub runs_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene-tile or change-pair dataset to disk.
    Generate(GenerateArgs),
    /// Pretrain the encoder on a tile directory.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint on a downstream task.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Pretrain and probe every ablation variant, or sweep the diffusion weight.
    Sweep(SweepArgs),
    /// Write feature inspection artifacts for a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Scenes,
    ChangePairs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "scenes")]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 8)]
    pub n_scenes: usize,
    #[arg(long, default_value_t = 64)]
    pub tiles_per_scene: usize,
    #[arg(long, default_value_t = 32)]
    pub tile_size: usize,
    /// Number of pairs for `--kind change-pairs`.
    #[arg(long, default_value_t = 64)]
    pub n_pairs: usize,
    /// Largest number of changed squares per pair.
    #[arg(long, default_value_t = 3)]
    pub max_squares: usize,
    /// Pairs whose second image equals the first (empty masks).
    #[arg(long)]
    pub identical: bool,
    #[arg(long, default_value_t = 0)]
    pub texture_seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Tile directory containing manifest.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with TrainConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ablate: Option<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_prime: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Contrastive (SGD) learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Diffusion predictor (Adam) learning rate.
    #[arg(long)]
    pub diffusion_lr: Option<f64>,
    /// Diffusion steps T; the linear schedule endpoints are rescaled to keep ᾱ_T comparable.
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Stop the diffusion gradient from reaching the encoder.
    #[arg(long)]
    pub detach_condition: bool,
    /// Continue from a checkpoint directory; its stored config is used.
    #[arg(long, conflicts_with_all = ["config", "ablate"])]
    pub resume: Option<PathBuf>,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Frozen-encoder change detection on a pair directory.
    ChangeDetect(ChangeDetectArgs),
    /// Scene classification by linear probing or fine-tuning.
    Classify(ClassifyArgs),
    /// Same as the top-level `inspect`.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ResultsArgs {
    /// JSON-lines results file (default: <runs-dir>/results.jsonl).
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChangeDetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training pairs, `<root>/<pair_id>/{a,b,mask}.png`.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out pairs; defaults to the training pairs.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Pyramid levels feeding the decoder (0 is the stem).
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub levels: Vec<usize>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub results: ResultsArgs,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tile directory; scene ids are the class labels.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "linear")]
    pub mode: ProbeMode,
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Defaults to 1e-3 (linear) or 1e-5 (finetune).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub results: ResultsArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows in the high-frequency grid.
    #[arg(long, default_value_t = 8)]
    pub rows: usize,
    /// Also fit a linear probe and write its confusion matrix.
    #[arg(long)]
    pub confusion: bool,
    #[arg(long, default_value_t = 100)]
    pub probe_epochs: usize,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub results: ResultsArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    /// baseline, swim_only, diff_only and full.
    Ablation,
    /// Full model over --lambdas.
    Lambda,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum, default_value = "ablation")]
    pub kind: SweepKind,
    /// TOML file with AblationSpec fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub tiles_per_scene: Option<usize>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,10,100")]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub results: ResultsArgs,
}
