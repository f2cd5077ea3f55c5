use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mgcot", version, about = "Multi-graph co-training for next-item recommendation")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a raw interaction log (or a synthetic chain) into a corpus directory.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic Markov-chain corpus directory.
    Synth(SynthArgs),
    /// Build the shortest-path global item graph of a corpus.
    BuildGraphs(BuildGraphsArgs),
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on the test split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the full model and its three ablations.
    Ablate(AblateArgs),
    /// Aggregate the metrics of several runs into one table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemaPreset {
    /// `session,item,timestamp` with epoch seconds.
    Generic,
    /// `sessionId;userId;itemId;timeframe;eventdate` with a header line.
    Diginetica,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TimeFormatArg {
    Epoch,
    EpochMillis,
    Date,
}

#[derive(Debug, Args)]
pub struct SynthOptions {
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    #[arg(long, default_value_t = 20_000)]
    pub sessions: usize,
    /// Dominant-successor weight; its transition mass is c / (1 + c).
    #[arg(long, default_value_t = 4.0)]
    pub concentration: f64,
    #[arg(long, default_value_t = 7)]
    pub synth_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub synth_test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Raw delimited interaction log.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Generate a synthetic corpus instead of reading a log.
    #[arg(long)]
    pub synthetic: bool,
    #[command(flatten)]
    pub synth: SynthOptions,
    #[arg(long, value_enum, default_value = "generic")]
    pub schema: SchemaPreset,
    #[arg(long)]
    pub delimiter: Option<char>,
    #[arg(long)]
    pub session_col: Option<usize>,
    #[arg(long)]
    pub item_col: Option<usize>,
    #[arg(long)]
    pub time_col: Option<usize>,
    #[arg(long, value_enum)]
    pub time_format: Option<TimeFormatArg>,
    /// Skip the first line.
    #[arg(long)]
    pub header: bool,
    #[arg(long, default_value_t = 2)]
    pub min_session_len: usize,
    #[arg(long, default_value_t = 5)]
    pub min_item_freq: usize,
    /// Sessions ending within this many days of the last timestamp are test.
    #[arg(long, conflicts_with_all = ["test_fraction", "boundary"])]
    pub test_days: Option<f64>,
    /// Most recent fraction of sessions used as test.
    #[arg(long, conflicts_with = "boundary")]
    pub test_fraction: Option<f64>,
    /// Sessions whose last timestamp is after this value are test.
    #[arg(long)]
    pub boundary: Option<i64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub synth: SynthOptions,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BuildGraphsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output file for the global graph.
    #[arg(long)]
    pub out: PathBuf,
    /// Shortest-path targets kept per item; 0 keeps all.
    #[arg(long, default_value_t = 50)]
    pub k_sp: usize,
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    #[arg(long)]
    pub directed: bool,
    #[arg(long)]
    pub force: bool,
}

/// Training settings shared by `train` and `ablate`.
#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Key-value config file; absent keys take the dataset defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset whose defaults apply (tmall, retailrocket, diginetica, synthetic, custom).
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long)]
    pub no_clip: bool,
    /// Any config key, as `key=value` in config-file syntax. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Ablation variant: no-neighbor-sessions, no-multi-attention, no-contrastive.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory of a finished training run.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory; defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Add popularity and first-order Markov baselines.
    #[arg(long)]
    pub baselines: bool,
    /// Write per-head attention weights of test examples.
    #[arg(long)]
    pub export_attention: bool,
    /// Test examples whose attention is exported.
    #[arg(long, default_value_t = 200)]
    pub attention_limit: usize,
    /// Length threshold between the short and long slices.
    #[arg(long)]
    pub slice_threshold: Option<usize>,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory receiving one run per variant plus the combined report.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories (or evaluation directories) to aggregate.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
