//! `hticl`: sample, train, index, classify, evaluate and serve.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hticl::inference::FallbackPolicy;
use hticl::{LabelTextMode, SamplingMode};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, missing input files, inconsistent options.
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] hticl::Error),
    #[error(transparent)]
    Service(#[from] hticl_service::ServiceError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hticl", version, about = "Retrieval-style in-context learning for hierarchical text classification")]
struct Cli {
    /// Manifest file to record this step in (default: manifest.json next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic taxonomy and labelled corpus.
    GenFixture(GenFixtureArgs),
    /// Draw a Q-shot training set from a labelled corpus.
    Sample(SampleArgs),
    /// Generate leaf descriptions with an LLM.
    DescribeLabels(DescribeArgs),
    /// Train the index encoder.
    TrainIndexer(TrainArgs),
    /// Encode a training set into a retrieval database.
    BuildDb(BuildDbArgs),
    /// Print the Top-K label-diverse neighbours of a text.
    Search(SearchArgs),
    /// Predict label paths for a file of texts.
    Classify(ClassifyArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Majority-vote an annotation log.
    Votes(VotesArgs),
}

#[derive(Args, Debug)]
pub struct GenFixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Children per node at each level.
    #[arg(long, value_delimiter = ',', default_value = "3,3,3")]
    pub branching: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub docs_per_leaf: usize,
    #[arg(long, default_value_t = 171)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Shots per label path.
    #[arg(long, default_value_t = 1)]
    pub q: usize,
    #[arg(long, default_value_t = 171)]
    pub seed: u64,
    #[arg(long, default_value = "balanced")]
    pub mode: SamplingMode,
    /// Sampled training set.
    #[arg(long)]
    pub out: PathBuf,
    /// Everything not sampled (a held-out set).
    #[arg(long)]
    pub rest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Taxonomy file with descriptions filled in.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "http")]
    pub llm: String,
    #[arg(long, default_value_t = hticl::inference::llm::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Log every LLM exchange to this JSONL file.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// Output params file.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON TrainConfig; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub infonce: bool,
    #[arg(long)]
    pub label_text: Option<LabelTextMode>,
    /// Per-epoch losses as JSONL.
    #[arg(long)]
    pub losses: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BuildDbArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    /// Corpus the database was built from; supplies demonstration texts.
    #[arg(long)]
    pub train: PathBuf,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSONL of `{"id", "text"}` records (extra fields ignored).
    #[arg(long)]
    pub input: PathBuf,
    /// Predictions as JSONL `{"id", "labels", "topk"}`.
    #[arg(long)]
    pub out: PathBuf,
    /// Full inference traces as JSONL.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Log every LLM exchange to this JSONL file (replayable with `script:PATH`).
    #[arg(long)]
    pub audit: Option<PathBuf>,
    /// Predict the Top-1 retrieved path; no LLM.
    #[arg(long)]
    pub retrieval_only: bool,
    /// JSON InferenceConfig; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// stub:echo, stub:oracle-demo, http or script:PATH.
    #[arg(long)]
    pub llm: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub no_iterative: bool,
    #[arg(long)]
    pub no_demos: bool,
    #[arg(long)]
    pub no_pruning: bool,
    #[arg(long)]
    pub no_candidate_set: bool,
    #[arg(long)]
    pub per_level_retrieval: bool,
    #[arg(long)]
    pub fallback: Option<FallbackPolicy>,
    /// Concurrent LLM requests.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Report as JSONL (summary, per level, per class).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score the best-overlap path among each prediction's `topk`.
    #[arg(long)]
    pub topk: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// JSONL of `{"id", "text"}` documents to annotate.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Encode each annotated document into the database.
    #[arg(long)]
    pub append_on_annotate: bool,
    #[arg(long, default_value = "stub:oracle-demo")]
    pub llm: String,
    #[arg(long, env = hticl_service::LISTEN_ENV, default_value = hticl_service::DEFAULT_LISTEN)]
    pub listen: String,
    #[arg(long, env = hticl_service::TOKEN_ENV, hide_env_values = true)]
    pub token: Option<String>,
}

#[derive(Args, Debug)]
pub struct VotesArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// One vote outcome per document as JSONL (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    let manifest = cli.manifest.as_deref();
    let result = match cli.command {
        Command::GenFixture(a) => commands::gen_fixture(&a, manifest),
        Command::Sample(a) => commands::sample(&a, manifest),
        Command::DescribeLabels(a) => commands::describe_labels(&a, manifest),
        Command::TrainIndexer(a) => commands::train_indexer(&a, manifest),
        Command::BuildDb(a) => commands::build_db(&a, manifest),
        Command::Search(a) => commands::search(&a),
        Command::Classify(a) => commands::classify(&a, manifest),
        Command::Evaluate(a) => commands::evaluate(&a, manifest),
        Command::Serve(a) => commands::serve(&a),
        Command::Votes(a) => commands::votes(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenFixture(_) => "gen-fixture",
        Command::Sample(_) => "sample",
        Command::DescribeLabels(_) => "describe-labels",
        Command::TrainIndexer(_) => "train-indexer",
        Command::BuildDb(_) => "build-db",
        Command::Search(_) => "search",
        Command::Classify(_) => "classify",
        Command::Evaluate(_) => "evaluate",
        Command::Serve(_) => "serve",
        Command::Votes(_) => "votes",
    }
}
