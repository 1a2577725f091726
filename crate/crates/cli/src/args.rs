use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "unitflow",
    version,
    about = "Unit-conditioned flow matching for degraded-to-clean mel conversion",
    propagate_version = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run config file (TOML); built-in tiny defaults when omitted
    #[arg(short, long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to the newest <run-root>/<config digest>-* or a new one
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Root directory for run directories [config: paths.run_root]
    #[arg(long, global = true, env = "UNITFLOW_RUN_ROOT", value_name = "DIR")]
    pub run_root: Option<PathBuf>,
    /// Worker threads [config: paths.workers]
    #[arg(long, global = true, env = "UNITFLOW_WORKERS", value_name = "N")]
    pub workers: Option<usize>,
    /// Base seed [config: seed]
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Replace existing outputs instead of refusing
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output on stderr (repeat for more)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic paired corpus
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Mel spectrogram extraction
    #[command(subcommand)]
    Mel(MelCmd),
    /// Voice activity detection
    #[command(subcommand)]
    Vad(VadCmd),
    /// Unit codebook
    #[command(subcommand)]
    Kmeans(KmeansCmd),
    /// Discrete unit sequences
    #[command(subcommand)]
    Units(UnitsCmd),
    /// Model training
    #[command(subcommand)]
    Train(TrainCmd),
    /// Generate a clean mel from units or a degraded mel
    Generate(GenerateArgs),
    /// Evaluate the finetuned model on the corpus test split
    Eval(EvalArgs),
    /// Render loss curves and mel comparisons into <run-dir>/plots
    Plot,
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Render the corpus into <run-dir>/corpus
    Build(CorpusBuildArgs),
}

#[derive(Debug, Args)]
pub struct CorpusBuildArgs {
    /// Training utterances [config: corpus.n_train]
    #[arg(long, value_name = "N")]
    pub n_train: Option<usize>,
    /// Held-out utterances [config: corpus.n_test]
    #[arg(long, value_name = "N")]
    pub n_test: Option<usize>,
    /// Degradation severity in [0, 1]; replaces any explicit corpus.degrade [config: corpus.severity]
    #[arg(long, value_name = "S")]
    pub severity: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum MelCmd {
    /// Log-mel of a 16-bit PCM WAV file (resampled to 16 kHz)
    Extract(MelExtractArgs),
}

#[derive(Debug, Args)]
pub struct MelExtractArgs {
    /// Input WAV file
    #[arg(short, long, value_name = "WAV")]
    pub input: PathBuf,
    /// Output mel file (UFMEL1 plus JSON sidecar)
    #[arg(short, long, value_name = "MEL")]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum VadCmd {
    /// Remove leading and trailing silence from a WAV file
    Trim(VadTrimArgs),
}

#[derive(Debug, Args)]
pub struct VadTrimArgs {
    /// Input WAV file
    #[arg(short, long, value_name = "WAV")]
    pub input: PathBuf,
    /// Output WAV file
    #[arg(short, long, value_name = "WAV")]
    pub output: PathBuf,
    /// Onset/offset level in dBFS [config: vad.edge_threshold_db]
    #[arg(long, value_name = "DB", allow_hyphen_values = true)]
    pub edge_db: Option<f64>,
    /// Speech continuation level in dBFS [config: vad.energy_threshold_db]
    #[arg(long, value_name = "DB", allow_hyphen_values = true)]
    pub energy_db: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum KmeansCmd {
    /// Fit a codebook on feature files or the corpus training split
    Fit(KmeansFitArgs),
}

#[derive(Debug, Args)]
pub struct KmeansFitArgs {
    /// Number of clusters [config: kmeans.k]
    #[arg(short, long, value_name = "K")]
    pub k: Option<usize>,
    /// Feature files (UFFEA1); defaults to the clean training features of the corpus
    #[arg(long, value_name = "FEA", num_args = 1..)]
    pub features: Vec<PathBuf>,
    /// Output codebook [default: <run-dir>/codebook.ufcbk]
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Lloyd iteration cap [config: kmeans.max_iters]
    #[arg(long, value_name = "N")]
    pub max_iters: Option<usize>,
    /// Restarts, best inertia kept [config: kmeans.n_init]
    #[arg(long, value_name = "N")]
    pub n_init: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum UnitsCmd {
    /// Nearest-centroid units of a feature file
    Assign(UnitsAssignArgs),
    /// Merge consecutive duplicate units
    Collapse(UnitsCollapseArgs),
}

#[derive(Debug, Args)]
pub struct UnitsAssignArgs {
    /// Feature file (UFFEA1)
    #[arg(long, value_name = "FEA")]
    pub features: PathBuf,
    /// Codebook [default: <run-dir>/codebook.ufcbk]
    #[arg(long, value_name = "FILE")]
    pub codebook: Option<PathBuf>,
    /// Output unit file
    #[arg(short, long, value_name = "FILE")]
    pub output: PathBuf,
    /// Collapse the assigned sequence before writing
    #[arg(long)]
    pub collapse: bool,
}

#[derive(Debug, Args)]
pub struct UnitsCollapseArgs {
    /// Input unit file
    #[arg(short, long, value_name = "FILE")]
    pub input: PathBuf,
    /// Output unit file
    #[arg(short, long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    /// Train on clean units and clean mel into <run-dir>/pretrain
    Pretrain(TrainArgs),
    /// Train on degraded units and clean mel into <run-dir>/finetune
    Finetune(TrainArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Total updates [config: <stage>.total_updates]
    #[arg(long, value_name = "N")]
    pub updates: Option<u64>,
    /// Peak learning rate [config: <stage>.peak_lr]
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    /// Warmup updates [config: <stage>.warmup_steps]
    #[arg(long, value_name = "N")]
    pub warmup: Option<u64>,
    /// Frames per batch [config: <stage>.batch_frames]
    #[arg(long, value_name = "N")]
    pub batch_frames: Option<usize>,
    /// Starting weights [finetune default: <run-dir>/pretrain/final.ufckp]
    #[arg(long, value_name = "CKPT", conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue an interrupted run of this stage from its checkpoint
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Stop after this many updates in this invocation
    #[arg(long, value_name = "N")]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Method {
    Euler,
    Midpoint,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    /// ODE steps [config: sampler.n_steps]
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    /// Sway coefficient in [-1, 1] [config: sampler.s]
    #[arg(long, value_name = "S", allow_hyphen_values = true)]
    pub sway: Option<f64>,
    /// ODE solver [config: sampler.method]
    #[arg(long, value_enum)]
    pub method: Option<Method>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["units", "features", "mel"]))]
pub struct GenerateArgs {
    /// Unit file (collapsed on load if needed)
    #[arg(long, value_name = "FILE")]
    pub units: Option<PathBuf>,
    /// Degraded feature file, quantized with the codebook
    #[arg(long, value_name = "FEA")]
    pub features: Option<PathBuf>,
    /// Degraded mel file (mel-input models)
    #[arg(long, value_name = "MEL")]
    pub mel: Option<PathBuf>,
    /// Model checkpoint [default: <run-dir>/finetune/final.ufckp]
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Codebook for --features [default: <run-dir>/codebook.ufcbk]
    #[arg(long, value_name = "FILE")]
    pub codebook: Option<PathBuf>,
    /// Clean reference mel used as the context prefix
    #[arg(long, value_name = "MEL")]
    pub ref_mel: Option<PathBuf>,
    /// Frames to generate; otherwise units x duplication
    #[arg(long, value_name = "N")]
    pub frames: Option<usize>,
    /// Frames per unit [config: eval.duplication; default: corpus median]
    #[arg(long, value_name = "X")]
    pub duplication: Option<f64>,
    /// Output mel file
    #[arg(short, long, value_name = "MEL")]
    pub output: PathBuf,
    /// Also write a Griffin-Lim rendering as 16-bit WAV
    #[arg(long, value_name = "WAV")]
    pub wav: Option<PathBuf>,
    /// Griffin-Lim iterations for --wav
    #[arg(long, value_name = "N", default_value_t = 32)]
    pub griffin_lim_iters: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint [default: <run-dir>/finetune/final.ufckp]
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate at most N test entries [config: eval.limit]
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// Sample pairs written to <run-dir>/samples [config: eval.keep_samples]
    #[arg(long, value_name = "N")]
    pub samples: Option<usize>,
    /// Report file [default: <run-dir>/eval.json]
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}
