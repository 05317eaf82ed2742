//! `dermachat`: one entry point for every stage of the pipeline.
//!
//! Exit status: 0 on success, 1 on a usage or validation error, 2 on a
//! runtime failure. Results go to stdout as JSON; logs and errors to stderr.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dermachat_core::Error> for CliError {
    fn from(e: dermachat_core::Error) -> Self {
        use dermachat_core::Error as E;
        match e {
            E::Config(_) | E::Validation(_) | E::InvalidInput(_) | E::EmptyDataset(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<dermachat_serve::ServeError> for CliError {
    fn from(e: dermachat_serve::ServeError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dermachat", version, about = "Desk-scale vision-language dermatology assistant")]
pub struct Cli {
    /// JSON file with one settings object per subcommand; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with planted concepts and classes.
    SynthData(SynthDataArgs),
    /// Convert concept tables or class folders into caption pairs.
    #[command(subcommand)]
    Ingest(IngestCommand),
    /// Stage 0: pretrain the vision side and the decoder's language prior.
    PretrainVision(PretrainArgs),
    /// Train the alignment layer on stage-1 or stage-2 pairs.
    Train(TrainArgs),
    /// Stage 0 then the four-variant stage ablation on a synthetic corpus.
    Ablation(AblationArgs),
    /// Ask a checkpoint about one image.
    Generate(GenerateArgs),
    /// Run the local HTTP service.
    Serve(ServeArgs),
    /// Evaluation tools.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Response-time benchmark against a running service.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum IngestCommand {
    /// A CSV of 0/1 concept flags per image.
    Concepts {
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory the image column is relative to.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One subdirectory per disease class.
    Classes {
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_text_len: Option<usize>,
    },
    /// Concatenate stage-2 pair files, first occurrence of an image wins.
    Merge {
        #[arg(long = "input", num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the model initialisation.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// 1 (concept captions) or 2 (diagnosis notes).
    #[arg(long)]
    pub stage: Option<u8>,
    /// Caption pairs as JSONL.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Starting checkpoint; a fresh model is built when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue an interrupted run from one of its checkpoints.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the desk-scale schedule instead of the full 20 x 5000 one.
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Repeat for a multi-turn dialogue; defaults to the four canonical prompts.
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long)]
    pub persist_dir: Option<PathBuf>,
    #[arg(long)]
    pub eval_records: Option<PathBuf>,
    #[arg(long)]
    pub max_upload_bytes: Option<usize>,
    #[arg(long)]
    pub request_timeout_s: Option<f64>,
    #[arg(long)]
    pub session_ttl_s: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Likert aggregation of rating records (CSV or JSONL).
    Aggregate {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Same as the top-level `bench`.
    Bench(BenchArgs),
    /// Behavioural probe of a checkpoint on a synthetic corpus.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Leading images to leave out, e.g. the training split.
        #[arg(long)]
        skip: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record a running service's sockets over a full canonical session.
    Guard {
        #[arg(long)]
        url: Option<String>,
        /// Service process id; defaults to this process.
        #[arg(long)]
        pid: Option<u32>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub url: Option<String>,
    /// Synthetic corpus whose images become the cases.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory of PNG/JPEG images to use instead of a corpus.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub cases: Option<usize>,
    /// CSV with a `latency_s` column; the bundled synthetic trace otherwise.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub timeout_s: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
