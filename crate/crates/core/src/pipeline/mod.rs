//! Training loops, checkpoints, evaluation and the two-stage pipeline.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod run;
pub mod synthetic;
pub mod train;

use std::collections::HashMap;

pub use checkpoint::{Checkpoint, Model, ModelKind};
pub use config::TrainConfig;
pub use eval::{
    evaluate_keyphrase, evaluate_qgen, qa_triples, score_predictions, Extractor, KeyphraseReport, QgenReport,
    TABLE_HEADER,
};
pub use run::{check_compatible, extractor_of, generate_for_spans, gradcheck_command, run_pipeline, PipelineOutput, QaRecord};
pub use train::{
    corpus_hash, log_to_jsonl, qgen_mean_loss, train_extractor, train_qgen, EpochLog, ExtractorOutcome, QgenOutcome,
};

use crate::corpus::squad::read_title_list;
use crate::corpus::{AlignmentReport, SquadExample, SquadFile};
use crate::error::{Error, Result};
use crate::nn::read_embedding_file;

/// Training and dev examples plus the alignment report of the training file.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<SquadExample>,
    pub dev: Vec<SquadExample>,
    pub report: AlignmentReport,
}

/// Loads `data`, carving out the dev split from `dev_data` or `dev_titles`.
pub fn load_splits(cfg: &TrainConfig) -> Result<Splits> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::Config("`data` is not set".into()))?;
    let file = SquadFile::read(path)?;
    let (train_file, dev_file) = match (&cfg.dev_data, &cfg.dev_titles) {
        (Some(dev), _) => (file, Some(SquadFile::read(dev)?)),
        (None, Some(titles)) => {
            let (rest, sel) = file.split_by_titles(&read_title_list(titles)?);
            (rest, Some(sel))
        }
        (None, None) => (file, None),
    };
    let (train, report) = train_file.to_examples();
    let dev = dev_file.map(|f| f.to_examples().0).unwrap_or_default();
    Ok(Splits { train, dev, report })
}

pub fn load_embeddings(cfg: &TrainConfig) -> Result<Option<HashMap<String, Vec<f64>>>> {
    cfg.embeddings.as_ref().map(|p| read_embedding_file(p, cfg.word_dim)).transpose()
}
