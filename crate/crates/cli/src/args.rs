use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "mdmf",
    version,
    about = "Generated-image detection with patch forensic signatures and deep-kernel MMD",
    arg_required_else_help = true
)]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Root seed for synthesis and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads [default: 1].
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a real and a generated `.pfse` file from the sparse-defect model.
    Synth(SynthArgs),
    /// Train a projection and write a `.pfsp` checkpoint.
    Train(TrainArgs),
    /// Score test records against a real reference bank.
    Score(ScoreArgs),
    /// Compute AUROC, AP and best accuracy for a score file or a baseline.
    Eval(EvalArgs),
    /// Score test records with a patch-classifier baseline.
    Baseline(BaselineArgs),
    /// Run the Monte-Carlo checks of the theoretical predictions.
    TheoryCheck(TheoryArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_real: PathBuf,
    #[arg(long)]
    pub out_fake: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub sigma_e: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub mu_norm: Option<f64>,
    #[arg(long)]
    pub sign_mixing: Option<f64>,
    /// Dilute the defect as `c K^-eta` with this `c`.
    #[arg(long)]
    pub dilution_scale: Option<f64>,
    #[arg(long)]
    pub dilution_exponent: Option<f64>,
    #[arg(long)]
    pub n_real: Option<usize>,
    #[arg(long)]
    pub n_fake: Option<usize>,
    /// Index of the first record; disjoint ranges give disjoint splits.
    #[arg(long)]
    pub offset: Option<u64>,
    #[arg(long)]
    pub pool_to: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub output_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub no_dropout: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub fake: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step objective history as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub pool_to: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Default)]
pub struct ThresholdFlags {
    /// Fixed decision threshold.
    #[arg(long, conflicts_with = "calibrate_alpha")]
    pub tau: Option<f64>,
    /// Threshold `mean + alpha * sd` of real-only scores [default: 3].
    #[arg(long)]
    pub calibrate_alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    /// Test `.pfse` files, scored in the order given; repeatable.
    #[arg(long, required = true)]
    pub tests: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pool_to: Option<usize>,
    #[command(flatten)]
    pub threshold: ThresholdFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Voting,
    Mean,
    Max,
    Topk,
}

#[derive(Debug, Args, Default)]
pub struct BaselineFlags {
    #[arg(long)]
    pub real: Option<PathBuf>,
    #[arg(long)]
    pub fake: Option<PathBuf>,
    /// Test `.pfse` files, scored in the order given; repeatable.
    #[arg(long)]
    pub tests: Vec<PathBuf>,
    /// Patch threshold for voting.
    #[arg(long)]
    pub theta: Option<f64>,
    /// `t` for top-k pooling.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub pool_to: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub inputs: BaselineFlags,
    #[command(flatten)]
    pub threshold: ThresholdFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV with header `source_id,score,label`.
    #[arg(long, conflicts_with = "baseline")]
    pub scores: Option<PathBuf>,
    /// Labelled `.pfse` files supplying ground truth by source id; repeatable.
    #[arg(long)]
    pub truth: Vec<PathBuf>,
    /// Train and evaluate a baseline instead of reading scores.
    #[arg(long, value_enum)]
    pub baseline: Option<Method>,
    /// Baseline scores in the score CSV schema.
    #[arg(long, requires = "baseline")]
    pub scores_out: Option<PathBuf>,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: BaselineFlags,
    #[command(flatten)]
    pub threshold: ThresholdFlags,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    /// Reduced sample budgets.
    #[arg(long)]
    pub quick: bool,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
