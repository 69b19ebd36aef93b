//! `vlpert`: data generation, perturbation, training and evaluation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// How a run ended, mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration (exit 1).
    Usage(String),
    /// The run itself failed (exit 2).
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub const DATA_DIR_ENV: &str = "ARTIFACT_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "vlpert", version, about = "Vision-language pre-training with report perturbations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired corpus (JSONL index plus PGM images).
    GenData(GenDataArgs),
    /// Apply the nine perturbation rules to newline-delimited reports.
    Perturb(PerturbArgs),
    /// Pre-train the dual encoder.
    Train(TrainArgs),
    /// Zero-shot structure evaluation: original report vs its perturbations.
    EvalStructure(EvalStructureArgs),
    /// Image-to-text and text-to-image recall@k.
    EvalRetrieval(EvalRetrievalArgs),
    /// Linear probe of frozen image embeddings on the finding labels.
    Probe(ProbeArgs),
    /// Compare autodiff gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of pairs
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    /// Image side in pixels
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $ARTIFACT_DATA_DIR, else ./data]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    /// Newline-delimited reports; `-` reads stdin
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Base seed; line i uses a seed derived from (seed, i)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory; JSON lines go to stdout when unset
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat dotted-key JSON config; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory [default: $ARTIFACT_DATA_DIR, else ./data]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run directory
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Derives the data, init and perturbation seeds [default: seeds.data=1, seeds.init=2, seeds.perturbation=3]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training epochs [default: 150]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight of the local loss [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the perturbation loss [default: 0.1]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Contrastive temperature [default: 0.07]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Attention temperature of the local loss [default: 1.0]
    #[arg(long)]
    pub tau_local: Option<f64>,
    /// Batch size [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// SGD learning rate [default: 0.0015]
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Coupled L2 weight decay [default: 0.0005]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Checkpoint every this many epochs; 0 keeps only the final one [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Resume from a training checkpoint (its config is used)
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Model file, or a training run directory containing model.json
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory [default: $ARTIFACT_DATA_DIR, else ./data]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Use only the first N pairs
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalStructureArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Seed for the evaluation perturbations
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory
    #[arg(long, default_value = "runs/eval-structure")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalRetrievalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Cutoffs, comma separated
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub k: Vec<usize>,
    /// Run directory
    #[arg(long, default_value = "runs/eval-retrieval")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Seed of the train/test split
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out samples [default: half the pairs]
    #[arg(long)]
    pub test_size: Option<usize>,
    /// Full-batch optimizer steps per classifier
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Run directory
    #[arg(long, default_value = "runs/probe")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random instances per checked function
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    /// Base seed of the instances
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory for the JSON report
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
