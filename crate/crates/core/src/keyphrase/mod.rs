//! Answer-candidate extraction: a rule-based entity tagger, neural entity
//! selection, and a pointer-network span extractor.

pub mod ent;
pub mod nes;
pub mod ptrnet;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use autodiff::{Graph, Mode, ParamId, ParamStore, RngStream, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{embedding_table, BiLstm, Encoded, RecurrentDropout};

pub use ent::{ent_baseline_tag, EntityKind, EntitySpan};
pub use nes::{nes_features, NesConfig, NesModel};
pub use ptrnet::{greedy_pointer_decode, ptrnet_target_sequence, PtrNetConfig, PtrNetModel};

/// Sorted, duplicate-free list of spans.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPhraseSet(Vec<AnswerSpan>);

impl KeyPhraseSet {
    pub fn from_spans(spans: impl IntoIterator<Item = AnswerSpan>) -> Self {
        let mut v: Vec<AnswerSpan> = spans.into_iter().collect();
        v.sort();
        v.dedup();
        KeyPhraseSet(v)
    }

    pub fn spans(&self) -> &[AnswerSpan] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn phrases(&self, doc: &Document) -> Vec<Vec<String>> {
        self.0.iter().map(|&s| doc.span_tokens(s).to_vec()).collect()
    }

    pub fn texts(&self, doc: &Document) -> Vec<String> {
        self.0.iter().map(|&s| doc.span_text(s)).collect()
    }
}

/// One JSON-lines record of extractor output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPhraseRecord {
    pub doc_id: String,
    pub spans: Vec<AnswerSpan>,
    pub texts: Vec<String>,
}

/// One JSON-lines record of an imported span file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanImport {
    pub doc_id: String,
    pub spans: Vec<AnswerSpan>,
}

pub fn read_span_file(path: &Path) -> Result<HashMap<String, Vec<AnswerSpan>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: HashMap<String, Vec<AnswerSpan>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SpanImport = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.entry(rec.doc_id).or_default().extend(rec.spans);
    }
    Ok(out)
}

/// Word-embedding BiLSTM document encoder used by both neural extractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub word_dim: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            word_dim: 300,
            hidden: 128,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DocEncoder {
    pub words: ParamId,
    pub lstm: BiLstm,
    pub config: EncoderConfig,
}

/// Token ids of a batch of documents in time-major order.
#[derive(Debug, Clone)]
pub struct DocBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub steps: usize,
}

impl DocBatch {
    pub fn new(docs: &[&Document], vocab: &Vocabulary) -> Self {
        let seqs: Vec<Vec<usize>> = docs
            .iter()
            .map(|d| d.tokens().iter().map(|t| vocab.id(t)).collect())
            .collect();
        let p = crate::corpus::pad_sequences(&seqs);
        DocBatch {
            ids: p.time_major_ids(),
            lengths: p.lengths,
            steps: p.max_len,
        }
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Encoder output plus the embedded inputs it consumed.
pub struct DocEncoding {
    pub enc: Encoded,
    pub embedded: Var,
}

impl DocEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        vocab: &Vocabulary,
        pretrained: Option<&HashMap<String, Vec<f64>>>,
        rng: &mut RngStream,
    ) -> Self {
        let words = ps.add(format!("{name}.words"), embedding_table(vocab, config.word_dim, pretrained, rng));
        let lstm = BiLstm::new(ps, &format!("{name}.lstm"), config.word_dim, config.hidden, rng);
        DocEncoder {
            words,
            lstm,
            config: config.clone(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.lstm.output_dim()
    }

    pub fn encode(&self, g: &mut Graph, batch: &DocBatch, mode: Mode, rng: &mut RngStream) -> Result<DocEncoding> {
        let table = g.param(self.words);
        let emb = g.select_rows(table, &batch.ids)?;
        let embedded = g.dropout(emb, self.config.dropout, mode, rng)?;
        let none = RecurrentDropout::none();
        let mut enc = self.lstm.encode(g, embedded, &batch.lengths, &none, &none)?;
        enc.annotations = g.dropout(enc.annotations, self.config.dropout, mode, rng)?;
        Ok(DocEncoding { enc, embedded })
    }
}

/// True when `span` shares a token with any of `gold`.
pub fn overlaps_any(span: AnswerSpan, gold: &[AnswerSpan]) -> bool {
    gold.iter().any(|g| span.overlaps(g))
}
