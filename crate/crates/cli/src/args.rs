use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "privcnp",
    version,
    about = "Differentially private convolutional conditional neural processes",
    arg_required_else_help = true,
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise multipliers of the three functional-mechanism accountants.
    Account(AccountArgs),
    /// Accountant comparison over a range of ε, as CSV.
    CompareAccountants(CompareArgs),
    /// Draws of the encoder noise process on a grid, as CSV.
    SampleGridNoise(SampleNoiseArgs),
    /// Generates tasks as JSON lines.
    GenTasks(GenTasksArgs),
    /// Meta-trains a model and writes a checkpoint.
    Train(TrainArgs),
    /// Evaluates a checkpoint on a task file.
    Eval(EvalArgs),
    /// Exact GP posterior and prior-marginal NLL per task.
    Oracle(OracleArgs),
    /// Bayes-optimal NLL for the signal-noise-only encoder.
    LowerBound(LowerBoundArgs),
}

#[derive(Debug, Args)]
pub struct AccountArgs {
    #[arg(long)]
    pub eps: f64,
    #[arg(long)]
    pub delta: f64,
    /// Squared sensitivity Δ².
    #[arg(long, default_value_t = 1.0)]
    pub sensitivity_sq: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, default_value_t = 10.0)]
    pub sensitivity_sq: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eps_min: f64,
    #[arg(long, default_value_t = 3.0)]
    pub eps_max: f64,
    /// Number of evenly spaced ε values, endpoints included.
    #[arg(long, default_value_t = 60)]
    pub steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleNoiseArgs {
    /// `origin:spacing:count` per axis, axes separated by commas.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, alias = "lambda")]
    pub lengthscale: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Eq,
    #[value(alias = "matern")]
    Matern32,
    Sawtooth,
}

/// Synthetic generator selection shared by `gen-tasks` and `train`.
#[derive(Debug, Args)]
pub struct GeneratorArgs {
    /// Fixed GP lengthscale; omitted means drawn per task.
    #[arg(long)]
    pub lengthscale: Option<f64>,
    /// Fixed sawtooth period; omitted means drawn per task.
    #[arg(long)]
    pub period: Option<f64>,
    /// Fixed context size instead of the generator's range.
    #[arg(long)]
    pub context_size: Option<usize>,
    #[arg(long)]
    pub target_count: Option<usize>,
    /// ε as a single value or `lo,hi`.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenTasksArgs {
    #[arg(long, value_enum, required_unless_present = "data")]
    pub family: Option<FamilyArg>,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    /// Draw targets from the context range.
    #[arg(long)]
    pub eval: bool,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// Real-data CSV to split into tasks instead of a synthetic family.
    #[arg(long, requires_all = ["x_col", "y_col", "context_size"])]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub x_col: Option<String>,
    #[arg(long)]
    pub y_col: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Tiny,
    Paper,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "eq")]
    pub tasks_family: FamilyArg,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[arg(long, value_enum, default_value = "tiny")]
    pub preset: PresetArg,
    /// Signal-noise-only training with fixed t and C.
    #[arg(long, conflicts_with = "non_private")]
    pub ablation: bool,
    #[arg(long, default_value_t = 0.5)]
    pub ablation_t: f64,
    #[arg(long, default_value_t = 2.0)]
    pub ablation_clip: f64,
    /// Noise-free encoder without clipping.
    #[arg(long)]
    pub non_private: bool,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long)]
    pub seed: u64,
    /// Validation-set size.
    #[arg(long, default_value_t = 256)]
    pub val_tasks: usize,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Checkpoint directory; the training log is written alongside.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Deploy,
    Train,
    Ablation,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds the privacy noise of each task.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Encoder mode; defaults to deploy, or to the training mode for
    /// models trained with parts of the mechanism disabled.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub workers: Option<usize>,
}

/// Kernel used for scoring; omitted fields come from each task's record.
#[derive(Debug, Args)]
pub struct KernelArgs {
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    #[arg(long)]
    pub lengthscale: Option<f64>,
    #[arg(long)]
    pub signal_scale: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub kernel: KernelArgs,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LowerBoundArgs {
    #[command(flatten)]
    pub kernel: KernelArgs,
    /// Fixed signal-noise magnitude.
    #[arg(long, conflicts_with_all = ["clip", "t"], required_unless_present_all = ["clip", "t"])]
    pub sigma_s: Option<f64>,
    /// Clip threshold; with `--t`, σ_s follows each task's budget.
    #[arg(long, requires = "t")]
    pub clip: Option<f64>,
    #[arg(long, requires = "clip")]
    pub t: Option<f64>,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
}
