use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

/// Deterministic pipeline for reference-weighted pre-training experiments.
///
/// Unset flags fall back to the `--config` key-value file (same key names as
/// the long flags), then to built-in defaults. The seed additionally falls
/// back to the PRIOR_SEED environment variable.
#[derive(Parser, Debug)]
#[command(name = "prior", version, about)]
pub struct Cli {
    /// Key-value config file (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic image-caption corpus as JSONL.
    GenData(GenDataArgs),
    /// Train the text-only reference model on captions alone.
    TrainRef(TrainRefArgs),
    /// Attach per-token reference probabilities to a corpus.
    Score(ScoreArgs),
    /// Train the prefix-conditioned model under either objective.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out corpus.
    Eval(EvalArgs),
    /// Importance-score and loss diagnostics over a scored corpus.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Fit a power law to one training run log.
    FitScaling(FitScalingArgs),
    /// Fit both objectives' logs and compare extrapolation error.
    CompareRuns(CompareRunsArgs),
}

#[derive(clap::Args, Debug)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long)]
    pub n: Option<u64>,
    /// Index of the first sample; disjoint corpora come from disjoint
    /// offset ranges under one seed.
    #[arg(long)]
    pub offset: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Attribute slots per image.
    #[arg(long)]
    pub slots: Option<usize>,
    /// Values per attribute slot.
    #[arg(long)]
    pub attrs: Option<usize>,
    /// Filler vocabulary size.
    #[arg(long)]
    pub filler: Option<usize>,
    /// Dominant Markov transition mass, in (1/filler, 1).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Geometric parameter for filler run lengths.
    #[arg(long)]
    pub run_p: Option<f64>,
    #[arg(long)]
    pub runs_min: Option<usize>,
    #[arg(long)]
    pub runs_max: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ModelDims {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
}

#[derive(clap::Args, Debug)]
pub struct TrainRefArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out corpus for the periodic evaluations.
    #[arg(long)]
    pub heldout: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[command(flatten)]
    pub dims: ModelDims,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Run-log output path (JSONL, one record per evaluation).
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct ScoreArgs {
    /// Reference checkpoint.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveArg {
    Ntp,
    Prior,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Scored corpus (from `score`).
    #[arg(long)]
    pub scored: PathBuf,
    #[arg(long)]
    pub heldout: PathBuf,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Importance exponent.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Drop the per-caption k factor from weight normalization.
    #[arg(long)]
    pub no_k_scale: bool,
    /// Comma-separated exponents; trains once per value with suffixed
    /// output paths.
    #[arg(long)]
    pub alpha_sweep: Option<String>,
    /// Alternate text-only batches in (image prefix withheld).
    #[arg(long)]
    pub text_mix: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[command(flatten)]
    pub dims: ModelDims,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Caption length vs mean importance score (CSV: length, mean_score, n).
    Length(LengthArgs),
    /// Mean importance score by token position (CSV: pos, mean_score, n).
    Position(PositionArgs),
    /// Model NLL above/below score thresholds
    /// (CSV: tau, related_nll, unrelated_nll, n_rel, n_unrel).
    Threshold(ThresholdArgs),
    /// AUC of the importance score against the ground-truth mask (JSON).
    Auc(AucArgs),
    /// Per-token log-prob gain of image conditioning (CSV: subset,
    /// mean_gain, n).
    Infogain(InfogainArgs),
}

#[derive(clap::Args, Debug)]
pub struct LengthArgs {
    #[arg(long)]
    pub scored: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct PositionArgs {
    #[arg(long)]
    pub scored: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_pos: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scored: PathBuf,
    /// Comma-separated thresholds, strictly increasing, in (0, 1).
    #[arg(long)]
    pub taus: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct AucArgs {
    #[arg(long)]
    pub scored: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct InfogainArgs {
    /// Prefix-conditioned checkpoint.
    #[arg(long)]
    pub cond: PathBuf,
    /// Text-only reference checkpoint.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub scored: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct FitScalingArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// attr-acc (default) or nll.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct CompareRunsArgs {
    #[arg(long)]
    pub ntp_log: PathBuf,
    #[arg(long)]
    pub prior_log: PathBuf,
    /// attr-acc (default) or nll.
    #[arg(long)]
    pub metric: Option<String>,
    /// Held-out token count; defaults to the last logged point.
    #[arg(long)]
    pub holdout_d: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}
