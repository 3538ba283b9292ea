//! `wvlp`: corpus building, pre-training, evaluation and ablations.

mod commands;
mod config;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit code 2 for bad usage or unreadable inputs, 1 for failures while
/// running.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(e: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<wvlp_core::Error> for CliError {
    fn from(e: wvlp_core::Error) -> Self {
        use wvlp_core::Error::*;
        match e {
            Template(_) | Precondition(_) | Manifest(_) | Config(_) | Checkpoint(_) => Self::usage(e),
            _ => Self::runtime(e),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "wvlp", version, about = "Vision-language pre-training from category labels")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate descriptions for a category list and write a corpus manifest.
    BuildCorpus(BuildCorpusArgs),
    /// Train a model on a corpus manifest.
    Pretrain(PretrainArgs),
    /// Retrieval recall of a checkpoint on one split of a corpus.
    Evaluate(EvaluateArgs),
    /// Pre-train and evaluate once per prompt (P1..P9) and once on all of them.
    AblatePrompts(AblateArgs),
    /// Pre-train and evaluate on aligned and on shuffled pairs.
    AblateShuffle(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Exact run directory, instead of a timestamped one under --runs-dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Fixture,
    Live,
}

#[derive(Debug, Clone, Args)]
pub struct BuildCorpusArgs {
    /// Category list: `.jsonl` entries or `id<TAB>label[, synonym]...` lines.
    #[arg(long)]
    pub categories: PathBuf,
    /// Prompt templates, `P<n><TAB>template<TAB>focus` per line; built-ins if absent.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub responses_per_prompt: u32,
    #[arg(long, value_enum, default_value = "fixture")]
    pub backend: BackendKind,
    /// JSON file of live-backend settings (endpoint, model, api_key_env, ...).
    #[arg(long)]
    pub backend_config: Option<PathBuf>,
    /// Response cache; in-memory if absent.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Image records, one JSON object per line; procedural images if absent.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Procedural images per category when --images is absent.
    #[arg(long, default_value_t = 8)]
    pub synthetic_images: usize,
    #[arg(long, default_value = "category-holdout")]
    pub split_policy: String,
    #[arg(long, default_value_t = 0.25)]
    pub eval_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Training flags; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Flat TOML file of model and training fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub queue_size: Option<usize>,
    /// Train on descriptions permuted across categories.
    #[arg(long)]
    pub shuffled: bool,
    /// Comma-separated prompt ids, e.g. `P1,P3`.
    #[arg(long)]
    pub prompt_filter: Option<String>,
    /// `uniform` or `binary-sum`.
    #[arg(long)]
    pub target: Option<String>,
    /// `uniform` or `hard`.
    #[arg(long)]
    pub negatives: Option<String>,
    /// EMA coefficient of a momentum encoder feeding the queues.
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Corpus manifest written by build-corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Base directory for relative image paths; the manifest's directory if absent.
    #[arg(long)]
    pub image_base: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Eval,
    Pretrain,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvalFlags {
    #[arg(long, value_enum, default_value = "eval")]
    pub split: SplitArg,
    /// `instance` (needs --pairs) or `category`.
    #[arg(long, default_value = "category")]
    pub mode: String,
    /// Rerank this many top candidates with the matching head; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub rerank_k: usize,
    /// `{"image_id": ..., "description_id": ...}` lines for instance mode.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[command(flatten)]
    pub run: RunArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::BuildCorpus(a) => commands::build_corpus(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::AblatePrompts(a) => commands::ablate_prompts(&a),
        Command::AblateShuffle(a) => commands::ablate_shuffle(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
