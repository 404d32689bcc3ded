use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Key-phrase extraction and question generation.
#[derive(Debug, Parser)]
#[command(name = "keyqg", version)]
pub struct Cli {
    /// Flat TOML training configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `output` from the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training data; overrides `data` from the configuration.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Dev data; overrides `dev_data` from the configuration.
    #[arg(long, global = true)]
    pub dev_data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExtractorKind {
    Nes,
    Ptrnet,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SyntheticCorpus {
    /// Twenty short paragraphs with two answers each.
    Overfit,
    /// About a thousand answers in entity-dense paragraphs.
    Trend,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GradcheckKind {
    Nes,
    Ptrnet,
    Qgen,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize and align the data, split off dev, write vocabularies.
    PrepareData {
        /// Generate a synthetic corpus instead of reading `data`.
        #[arg(long, value_enum)]
        synthetic: Option<SyntheticCorpus>,
    },
    /// Train a key-phrase extractor.
    TrainExtractor {
        #[arg(long, value_enum)]
        kind: ExtractorKind,
    },
    /// Train the question generator on gold answers.
    TrainQgen,
    /// Extract key phrases with a checkpoint or the entity baseline.
    Extract {
        /// Extractor checkpoint; the entity baseline when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Documents in SQuAD JSON form.
        #[arg(long)]
        input: PathBuf,
    },
    /// Generate questions for gold or imported answer spans.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// JSON-lines `{"doc_id", "spans"}` records; gold answers when omitted.
        #[arg(long)]
        spans: Option<PathBuf>,
    },
    /// Extract key phrases, then generate one question per phrase.
    Pipeline {
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        qgen: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score extractors against gold answers (F1_MS, precision, recall).
    EvaluateKeyphrase {
        /// `ent` or an extractor checkpoint path; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        input: PathBuf,
    },
    /// BLEU-4 of greedy decodes against gold questions.
    EvaluateQgen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of a full model loss at toy sizes.
    Gradcheck {
        #[arg(long, value_enum)]
        kind: GradcheckKind,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(commands::Status::Success) => ExitCode::SUCCESS,
        Ok(commands::Status::ValidationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
