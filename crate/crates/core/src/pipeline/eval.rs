//! Extraction, generation and their corpus-level evaluation.

use std::collections::HashMap;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, Document, SquadExample};
use crate::error::{Error, Result};
use crate::keyphrase::{ent_baseline_tag, KeyPhraseRecord, KeyPhraseSet, NesModel, PtrNetModel};
use crate::metrics::{bleu4, exact_match_rate, multi_span_f1, BleuReport, CorpusKeyphraseScores};
use crate::qgen::{GeneratedQuestion, QgenExample, QgenModel};

/// Maps `f` over `items` on all available cores, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Extractor<'a> {
    Ent,
    Nes(&'a NesModel),
    PtrNet(&'a PtrNetModel),
}

impl Extractor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Extractor::Ent => "ENT",
            Extractor::Nes(_) => "NES",
            Extractor::PtrNet(_) => "PtrNet",
        }
    }

    pub fn extract(&self, doc: &Document) -> Result<KeyPhraseSet> {
        match self {
            Extractor::Ent => Ok(KeyPhraseSet::from_spans(ent_baseline_tag(doc, &[]).into_iter().map(|e| e.span))),
            Extractor::Nes(m) => {
                let ents: Vec<AnswerSpan> = ent_baseline_tag(doc, &[]).into_iter().map(|e| e.span).collect();
                m.select_topk(doc, &ents)
            }
            Extractor::PtrNet(m) => Ok(m.decode(doc)?.phrases),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyphraseReport {
    pub model: String,
    pub scores: CorpusKeyphraseScores,
    /// Per-document predictions the scores were computed from.
    pub predictions: Vec<KeyPhraseRecord>,
}

impl KeyphraseReport {
    /// `model  F1_MS  Prec.  Rec.` as a fixed-width table row.
    pub fn table_row(&self) -> String {
        format!(
            "{:<8} {:>6.3} {:>6.3} {:>6.3}",
            self.model, self.scores.f1_ms, self.scores.precision, self.scores.recall
        )
    }
}

pub const TABLE_HEADER: &str = "Model     F1_MS  Prec.   Rec.";

fn record(e: &SquadExample, set: &KeyPhraseSet) -> KeyPhraseRecord {
    KeyPhraseRecord {
        doc_id: e.doc_id.clone(),
        spans: set.spans().to_vec(),
        texts: set.texts(&e.document),
    }
}

/// Runs the extractor over every document that has gold answers and scores
/// the predictions against the gold spans.
pub fn evaluate_keyphrase(ex: &Extractor, examples: &[SquadExample]) -> Result<KeyphraseReport> {
    let docs: Vec<&SquadExample> = examples.iter().filter(|e| !e.qas.is_empty()).collect();
    let sets = par_map(&docs, |e| ex.extract(&e.document));
    let mut predictions = Vec::with_capacity(docs.len());
    for (e, s) in docs.iter().zip(sets) {
        predictions.push(record(e, &s?));
    }
    let scores = score_predictions(&predictions, examples)?;
    Ok(KeyphraseReport {
        model: ex.name().to_string(),
        scores,
        predictions,
    })
}

/// Corpus scores of dumped predictions, matched to gold by document id.
pub fn score_predictions(predictions: &[KeyPhraseRecord], examples: &[SquadExample]) -> Result<CorpusKeyphraseScores> {
    let by_id: HashMap<&str, &SquadExample> = examples.iter().map(|e| (e.doc_id.as_str(), e)).collect();
    let mut per_doc = Vec::with_capacity(predictions.len());
    for p in predictions {
        let e = by_id
            .get(p.doc_id.as_str())
            .ok_or_else(|| Error::Schema(format!("prediction for unknown document `{}`", p.doc_id)))?;
        let doc = &e.document;
        if let Some(s) = p.spans.iter().find(|s| !s.within(doc.len())) {
            return Err(Error::Index(format!("span {s:?} outside document `{}`", p.doc_id)));
        }
        let pred: Vec<&[String]> = p.spans.iter().map(|&s| doc.span_tokens(s)).collect();
        let gold: Vec<&[String]> = e.gold_spans().into_iter().map(|s| doc.span_tokens(s)).collect();
        let pred: Vec<Vec<&String>> = pred.iter().map(|t| t.iter().collect()).collect();
        let gold: Vec<Vec<&String>> = gold.iter().map(|t| t.iter().collect()).collect();
        per_doc.push((multi_span_f1(&pred, &gold), exact_match_rate(&pred, &gold)));
    }
    Ok(CorpusKeyphraseScores::from_documents(&per_doc))
}

/// Every (document, gold answer, gold question) triple of a corpus.
pub fn qa_triples(examples: &[SquadExample]) -> Vec<QgenExample<'_>> {
    examples
        .iter()
        .filter(|e| !e.document.is_empty())
        .flat_map(|e| {
            e.qas.iter().map(move |q| QgenExample {
                doc: &e.document,
                span: q.span,
                question: &q.question,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QgenReport {
    pub bleu: BleuReport,
    pub questions: usize,
    /// Fraction of generated questions equal to the gold one token for token.
    pub exact_match: f64,
    pub generated: Vec<GeneratedQuestion>,
}

/// Greedy decodes for every gold answer, scored with corpus BLEU-4.
pub fn evaluate_qgen(m: &QgenModel, examples: &[SquadExample]) -> Result<QgenReport> {
    let triples = qa_triples(examples);
    if triples.is_empty() {
        return Err(Error::Config("no question/answer pairs to evaluate".into()));
    }
    let out = par_map(&triples, |t| m.greedy_decode(t.doc, t.span, m.config.max_decode_length));
    let generated: Vec<GeneratedQuestion> = out.into_iter().collect::<Result<_>>()?;
    let cands: Vec<Vec<String>> = generated.iter().map(|g| g.tokens.clone()).collect();
    let refs: Vec<Vec<String>> = triples.iter().map(|t| t.question.to_vec()).collect();
    let exact = cands.iter().zip(&refs).filter(|(c, r)| c == r).count();
    Ok(QgenReport {
        bleu: bleu4(&cands, &refs)?,
        questions: triples.len(),
        exact_match: exact as f64 / triples.len() as f64,
        generated,
    })
}
