//! The `icenode` command: synthesize cohorts, train, evaluate, compare,
//! export risk trajectories and run the gradient checks.

mod commands;
mod error;
mod manifest;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::CliError;
pub use manifest::{read_manifest, sha256_file, RunManifest};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const VALID_AUC_FILE: &str = "valid_auc.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const QUANTILE_FILE: &str = "quantile_accuracy.csv";
pub const CODE_AUC_FILE: &str = "code_auc.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const COMPETENCY_COUNTS_FILE: &str = "competency_counts.csv";
pub const COMPETENCY_CODES_FILE: &str = "competency_codes.csv";
pub const DELONG_FILE: &str = "delong.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

#[derive(Debug, Parser)]
#[command(name = "icenode", version, about = "Continuous-time disease progression models over clinical codes")]
pub struct Cli {
    /// Worker threads for per-patient work.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic cohort with a planted time-gap rule.
    Synth(SynthArgs),
    /// Train one model and save the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint: visit-AUC, per-code AUC and top-k accuracy by frequency group.
    Evaluate(EvaluateArgs),
    /// Assign codes to models by per-code AUC and paired DeLong tests.
    Compare(CompareArgs),
    /// Export one patient's continuous risk trajectory.
    Trajectory(TrajectoryArgs),
    /// Check analytic gradients and solver accuracy against oracles.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Flat TOML file of generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_patients: Option<usize>,
    /// Records file to write.
    #[arg(long, env = "ICENODE_SYNTH_OUT")]
    pub out: PathBuf,
    /// Also write the matching code hierarchy (child<TAB>parent lines).
    #[arg(long)]
    pub ontology_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingArg {
    Matrix,
    Gram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Patient records file.
    #[arg(long, env = "ICENODE_DATA")]
    pub data: PathBuf,
    /// Seed of the 70/15/15 patient split; defaults to the checkpoint's.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// icenode, icenode-uniform, gru or logreg.
    #[arg(long)]
    pub model: String,
    #[arg(long, value_enum)]
    pub embedding: Option<EmbeddingArg>,
    /// Code hierarchy file, required for the gram embedding.
    #[arg(long, env = "ICENODE_ONTOLOGY")]
    pub ontology: Option<PathBuf>,
    /// Flat TOML config; may name a `preset`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base values when no config file is given: desk or full.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, env = "ICENODE_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Codes scored per visit for the top-k accuracy table.
    #[arg(long, default_value_t = icenode::evaluation::DEFAULT_TOP_K)]
    pub k: usize,
    /// Average top-k accuracy over codes instead of occurrences.
    #[arg(long)]
    pub macro_average: bool,
    #[arg(long, env = "ICENODE_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Two or more checkpoints. Repeatable.
    #[arg(long = "checkpoint", num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0.01)]
    pub p_threshold: f64,
    #[arg(long, default_value_t = 0.9)]
    pub auc_threshold: f64,
    #[arg(long, default_value_t = icenode::evaluation::DEFAULT_TOP_K)]
    pub k: usize,
    #[arg(long, env = "ICENODE_OUT_DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = "ICENODE_DATA")]
    pub data: PathBuf,
    #[arg(long)]
    pub subject: String,
    /// Comma-separated code labels to export.
    #[arg(long, value_delimiter = ',', required = true)]
    pub codes: Vec<String>,
    #[arg(long, default_value_t = icenode::trajectory::DEFAULT_RESOLUTION)]
    pub resolution: usize,
    /// CSV file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    /// Flip the sign of the reverse-mode tanh rule.
    TanhSign,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random programs per engine check.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, value_enum)]
    pub inject_fault: Option<FaultArg>,
    /// Directory for the JSON report and manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let pool = if cli.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cli.threads)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let pool = pool.as_ref();
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a, pool),
        Command::Evaluate(a) => commands::evaluate(&a, pool),
        Command::Compare(a) => commands::compare(&a, pool),
        Command::Trajectory(a) => commands::trajectory(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}
