//! `ivqa`: build vocabularies, make synthetic data, train, generate
//! questions, score them, and check gradients.
//!
//! Exit status is 0 on success, 1 when a verification fails (gradient check
//! or a non-finite loss during training) and 2 for usage and IO errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Preset;

#[derive(Parser, Debug)]
#[command(
    name = "ivqa",
    version,
    about = "Answer-conditioned question generation from regional image features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Keep instances with frequent answers and build the vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Write a synthetic features file and dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Generate questions for (image, answer) pairs.
    Generate(GenerateArgs),
    /// Score generated questions against gold questions.
    Evaluate(EvaluateArgs),
    /// Compare backward-pass gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct BuildVocabArgs {
    /// Dataset JSON Lines file ({"image_id","answer","question"} per line).
    #[arg(long)]
    pub data: PathBuf,
    /// Keep instances whose answer is among this many most frequent answers.
    #[arg(long, default_value_t = 3000)]
    pub answer_top: usize,
    /// Output directory for vocab.txt and dataset.filtered.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Number of images.
    #[arg(long, default_value_t = 8)]
    pub images: usize,
    /// Regions per image.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Visual feature size.
    #[arg(long, default_value_t = 16)]
    pub dv: usize,
    /// Question/answer pairs per image.
    #[arg(long, default_value_t = 1)]
    pub qa_per_image: usize,
    /// Receives features.jsonl and dataset.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat key = value config file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base hyperparameters before the config file and flags.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Dataset JSON Lines file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Regional features JSON Lines file.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Text embedding file. Without it label embeddings are seeded random.
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Output directory for model.ckpt and loss.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Drop the semantic features and the guiding attention.
    #[arg(long)]
    pub ablate: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Constant learning rate for every epoch.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Threads per batch. Results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Regional features JSON Lines file.
    #[arg(long)]
    pub features: PathBuf,
    /// JSON Lines of {"image_id","answer"}.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSON Lines of {"image_id","answer","question","logprob"}.
    #[arg(long)]
    pub out: PathBuf,
    /// Beam width. 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    /// Questions written per input, best first. At most the beam width.
    #[arg(long, default_value_t = 1)]
    pub top: usize,
    /// Also write per-token region attention of the best question here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Maximum generated length. Defaults to the model's question length.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Threads across inputs. Output order follows the input.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Generation JSON Lines file.
    #[arg(long)]
    pub generated: PathBuf,
    /// Dataset JSON Lines file with gold questions.
    #[arg(long)]
    pub gold: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Config file overriding the tiny network's sizes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Negate one backward rule (tanh, sigmoid or matvec) to test the check.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass.
    Verification(anyhow::Error),
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let nonfinite = matches!(
            e.downcast_ref::<ivqa_core::Error>(),
            Some(ivqa_core::Error::NonFiniteLoss { .. })
        );
        if nonfinite {
            Failure::Verification(e)
        } else {
            Failure::Usage(e)
        }
    }
}

impl From<ivqa_core::Error> for Failure {
    fn from(e: ivqa_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildVocab(a) => commands::build_vocab(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain joined with `: `, skipping causes the previous message
/// already spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}
