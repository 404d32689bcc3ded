//! The two-stage pipeline and the whole-model gradient check command.

use autodiff::{GradCheckOptions, GradCheckReport, Mode, RngStream};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Model, ModelKind};
use super::eval::{par_map, Extractor};
use crate::corpus::{AnswerSpan, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::{check_loss, randomize_params, GRADCHECK_SCALE};
use crate::keyphrase::{EncoderConfig, NesConfig, NesModel, PtrNetConfig, PtrNetModel};
use crate::qgen::{GeneratedQuestion, Provenance, QgenConfig, QgenExample, QgenModel, QgenVocabs, StopReason};

/// One generated question for one extracted key phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub doc_id: String,
    pub answer_span: AnswerSpan,
    pub answer_text: String,
    pub question: String,
    pub question_tokens: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub stop_reason: StopReason,
}

impl QaRecord {
    pub fn new(doc_id: &str, doc: &Document, span: AnswerSpan, q: GeneratedQuestion) -> Self {
        QaRecord {
            doc_id: doc_id.to_string(),
            answer_span: span,
            answer_text: doc.span_text(span),
            question: q.tokens.join(" "),
            question_tokens: q.tokens,
            provenance: q.provenance,
            stop_reason: q.stop_reason,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    pub records: Vec<QaRecord>,
    /// Documents for which no key phrase was extracted.
    pub empty_documents: Vec<String>,
}

impl PipelineOutput {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }
}

/// Extractor and question generator must come from the same corpus.
pub fn check_compatible(extractor: &Checkpoint, qgen: &Checkpoint) -> Result<()> {
    if qgen.model.kind() != ModelKind::Qgen {
        return Err(Error::Compatibility(format!("expected a qgen checkpoint, found {}", qgen.model.kind())));
    }
    if extractor.model.kind() == ModelKind::Qgen {
        return Err(Error::Compatibility("expected an extractor checkpoint, found qgen".into()));
    }
    if extractor.corpus_hash != qgen.corpus_hash {
        return Err(Error::Compatibility(format!(
            "extractor corpus hash {} differs from question generator corpus hash {}",
            extractor.corpus_hash, qgen.corpus_hash
        )));
    }
    Ok(())
}

pub fn extractor_of(ck: &Checkpoint) -> Result<Extractor<'_>> {
    match &ck.model {
        Model::Nes(m) => Ok(Extractor::Nes(m)),
        Model::PtrNet(m) => Ok(Extractor::PtrNet(m)),
        Model::Qgen(_) => Err(Error::Compatibility("a qgen checkpoint cannot extract key phrases".into())),
    }
}

/// Questions for the given spans of one document.
pub fn generate_for_spans(qgen: &QgenModel, doc_id: &str, doc: &Document, spans: &[AnswerSpan]) -> Result<Vec<QaRecord>> {
    let mut out = Vec::with_capacity(spans.len());
    for &s in spans {
        if !s.within(doc.len()) {
            return Err(Error::Index(format!("span {s:?} outside document `{doc_id}`")));
        }
        let q = qgen.greedy_decode(doc, s, qgen.config.max_decode_length)?;
        out.push(QaRecord::new(doc_id, doc, s, q));
    }
    Ok(out)
}

/// Extracts key phrases from every document, then generates one question
/// per phrase.
pub fn run_pipeline(extractor: &Extractor, qgen: &QgenModel, docs: &[(String, Document)]) -> Result<PipelineOutput> {
    let per_doc = par_map(docs, |(id, doc)| -> Result<Vec<QaRecord>> {
        let set = extractor.extract(doc)?;
        generate_for_spans(qgen, id, doc, set.spans())
    });
    let mut out = PipelineOutput::default();
    for ((id, _), recs) in docs.iter().zip(per_doc) {
        let recs = recs?;
        if recs.is_empty() {
            out.empty_documents.push(id.clone());
        }
        out.records.extend(recs);
    }
    Ok(out)
}

fn toy_docs() -> (Document, Document) {
    (Document::new("Paris hosted the 1900 Summer Olympics ."), Document::new("the cat sat"))
}

fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        word_dim: 4,
        hidden: 3,
        dropout: 0.0,
    }
}

/// Finite-difference check of a model's full loss at toy sizes (documents
/// of at most 8 tokens, hidden sizes of at most 8).
pub fn gradcheck_command(kind: ModelKind, seed: u64) -> Result<GradCheckReport> {
    let (d1, d2) = toy_docs();
    let vocab = Vocabulary::build([d1.tokens(), d2.tokens()], 100);
    let opts = GradCheckOptions::default();
    let rng = || RngStream::new(0);
    match kind {
        ModelKind::Nes => {
            let cfg = NesConfig {
                encoder: toy_encoder(),
                mlp_hidden: [5, 4],
                k: 6,
            };
            let mut m = NesModel::new(cfg, vocab, None, seed);
            randomize_params(&mut m.params, GRADCHECK_SCALE, seed);
            let ents = vec![vec![AnswerSpan::new(0, 0), AnswerSpan::new(3, 5)], vec![AnswerSpan::new(1, 1)]];
            let gold = vec![vec![AnswerSpan::new(3, 5)], vec![]];
            check_loss(
                &mut m,
                |m, g| {
                    let l = m.loss(g, &[&d1, &d2], &ents, &gold, Mode::Eval, &mut rng())?;
                    Ok(l.expect("toy batch has candidates"))
                },
                opts,
            )
        }
        ModelKind::Ptrnet => {
            let cfg = PtrNetConfig {
                encoder: toy_encoder(),
                decoder_hidden: 5,
                max_phrases: 4,
            };
            let mut m = PtrNetModel::new(cfg, vocab, None, seed);
            randomize_params(&mut m.params, GRADCHECK_SCALE, seed);
            let gold = vec![vec![AnswerSpan::new(0, 0), AnswerSpan::new(3, 5)], vec![AnswerSpan::new(1, 1)]];
            check_loss(&mut m, |m, g| m.loss(g, &[&d1, &d2], &gold, Mode::Eval, &mut rng()), opts)
        }
        ModelKind::Qgen => {
            let q1: Vec<String> = ["who", "hosted", "the", "1900", "summer", "olympics", "?"].map(String::from).to_vec();
            let q2: Vec<String> = ["what", "sat", "?"].map(String::from).to_vec();
            let vocabs = QgenVocabs::build(&[&d1, &d2], &[&q1, &q2], 100, 4);
            let cfg = QgenConfig {
                word_dim: 4,
                char_embedding_dim: 2,
                char_hidden: 2,
                encoder_hidden: 6,
                aggregation_hidden: 2,
                decoder_hidden: 4,
                attention_hidden: 3,
                generator_hidden: 4,
                dropout: 0.0,
                max_decode_length: 10,
            };
            let mut m = QgenModel::new(cfg, vocabs, None, seed);
            randomize_params(&mut m.params, GRADCHECK_SCALE, seed);
            check_loss(
                &mut m,
                |m, g| {
                    let batch = [
                        QgenExample { doc: &d1, span: AnswerSpan::new(0, 0), question: &q1 },
                        QgenExample { doc: &d2, span: AnswerSpan::new(1, 1), question: &q2 },
                    ];
                    Ok(m.loss(g, &batch, Mode::Eval, &mut rng())?.0)
                },
                opts,
            )
        }
    }
}
