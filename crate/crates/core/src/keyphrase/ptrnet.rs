//! Pointer-network extractor: a decoder LSTM points at start and end
//! positions of successive answers, then at a terminator.

use std::collections::HashMap;

use autodiff::tensor::argmax;
use autodiff::{Graph, Mode, ParamId, ParamStore, Parameterized, RngStream, Var};
use serde::{Deserialize, Serialize};

use super::{DocBatch, DocEncoder, DocEncoding, EncoderConfig, KeyPhraseSet};
use crate::corpus::{AnswerSpan, Document, Vocabulary};
use crate::error::Result;
use crate::nn::linear::glorot;
use crate::nn::LstmCell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtrNetConfig {
    pub encoder: EncoderConfig,
    pub decoder_hidden: usize,
    pub max_phrases: usize,
}

impl Default for PtrNetConfig {
    fn default() -> Self {
        PtrNetConfig {
            encoder: EncoderConfig::default(),
            decoder_hidden: 256,
            max_phrases: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PtrNetModel {
    pub params: ParamStore,
    pub config: PtrNetConfig,
    pub vocab: Vocabulary,
    pub encoder: DocEncoder,
    /// Annotation row of the virtual terminator position.
    pub term_annotation: ParamId,
    /// Decoder input at the first step.
    pub go_input: ParamId,
    /// Decoder input after the terminator was pointed at.
    pub term_input: ParamId,
    /// Projects the last annotation row to the initial decoder state.
    pub init: ParamId,
    pub decoder: LstmCell,
    /// Bilinear attention matrix, `decoder_hidden × annotation dim`.
    pub w1: ParamId,
}

impl Parameterized for PtrNetModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Sorted, de-duplicated start/end positions followed by the terminator
/// position `n_d` twice.
pub fn ptrnet_target_sequence(gold: &[AnswerSpan], n_d: usize) -> Vec<usize> {
    let set = KeyPhraseSet::from_spans(gold.iter().copied());
    let mut out: Vec<usize> = set.spans().iter().flat_map(|s| [s.start, s.end]).collect();
    out.extend([n_d, n_d]);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointerDecode {
    pub phrases: KeyPhraseSet,
    /// Every position pointed at, in order.
    pub pointed: Vec<usize>,
}

/// Alternating start/end argmax decoding. `next(prev)` returns the
/// distribution over positions `0..=n_d` given the previously pointed
/// position (`None` at the first step). Stops when a start step points at
/// the terminator `n_d` or after `max_phrases` pairs. Pairs whose end is
/// before their start or is the terminator are dropped.
pub fn greedy_pointer_decode<F>(n_d: usize, max_phrases: usize, mut next: F) -> Result<PointerDecode>
where
    F: FnMut(Option<usize>) -> Result<Vec<f64>>,
{
    let mut prev = None;
    let mut spans = Vec::new();
    let mut pointed = Vec::new();
    for _ in 0..max_phrases {
        let s = argmax(&next(prev)?);
        pointed.push(s);
        if s >= n_d {
            break;
        }
        let e = argmax(&next(Some(s))?);
        pointed.push(e);
        prev = Some(e);
        if e < n_d && e >= s {
            spans.push(AnswerSpan::new(s, e));
        }
    }
    Ok(PointerDecode {
        phrases: KeyPhraseSet::from_spans(spans),
        pointed,
    })
}

/// Per-batch pieces shared by training and decoding.
struct Pointing {
    /// `((T+1)·B) × D`; row `p·B + b` is position `p` of document `b`, with
    /// the terminator at `p = len_b`.
    keys: Var,
    /// Row-major `B × (T+1)`: positions `0..=len_b` of each document.
    keep: Vec<bool>,
    /// Rows: embedded document words, then the go and terminator inputs.
    inputs: Var,
    h0: Var,
    batch: usize,
    steps: usize,
}

impl Pointing {
    fn input_row(&self, b: usize, prev: Option<usize>, len: usize) -> usize {
        match prev {
            None => self.steps * self.batch,
            Some(p) if p >= len => self.steps * self.batch + 1,
            Some(p) => p * self.batch + b,
        }
    }
}

impl PtrNetModel {
    pub fn new(
        config: PtrNetConfig,
        vocab: Vocabulary,
        pretrained: Option<&HashMap<String, Vec<f64>>>,
        seed: u64,
    ) -> Self {
        let mut rng = RngStream::new(seed);
        let mut params = ParamStore::new();
        let encoder = DocEncoder::new(&mut params, "ptr.encoder", &config.encoder, &vocab, pretrained, &mut rng);
        let d = encoder.output_dim();
        let wd = config.encoder.word_dim;
        let hp = config.decoder_hidden;
        let term_annotation = params.add_uniform("ptr.term_annotation", 1, d, 0.1, &mut rng);
        let go_input = params.add_uniform("ptr.go_input", 1, wd, 0.1, &mut rng);
        let term_input = params.add_uniform("ptr.term_input", 1, wd, 0.1, &mut rng);
        let init = params.add_uniform("ptr.init", d, hp, glorot(d, hp), &mut rng);
        let decoder = LstmCell::new(&mut params, "ptr.decoder", wd, hp, &mut rng);
        let w1 = params.add_uniform("ptr.w1", hp, d, glorot(hp, d), &mut rng);
        PtrNetModel {
            params,
            config,
            vocab,
            encoder,
            term_annotation,
            go_input,
            term_input,
            init,
            decoder,
            w1,
        }
    }

    fn pointing(&self, g: &mut Graph, batch: &DocBatch, enc: &DocEncoding) -> Result<Pointing> {
        let (b, t) = (batch.batch(), batch.steps);
        let term = g.param(self.term_annotation);
        let term_rows = g.select_rows(term, &vec![0; b])?;
        let with_term = g.concat_rows(&[enc.enc.annotations, term_rows])?;
        let mut idx = Vec::with_capacity((t + 1) * b);
        let mut keep = vec![false; b * (t + 1)];
        for p in 0..=t {
            for (r, &len) in batch.lengths.iter().enumerate() {
                idx.push(if p < len { p * b + r } else { t * b + r });
                keep[r * (t + 1) + p] = p <= len;
            }
        }
        let keys = g.select_rows(with_term, &idx)?;
        let go = g.param(self.go_input);
        let ti = g.param(self.term_input);
        let inputs = g.concat_rows(&[enc.embedded, go, ti])?;
        let last: Vec<usize> = batch.lengths.iter().map(|&l| l.saturating_sub(1)).collect();
        let h_last = enc.enc.rows_at(g, &last)?;
        let w = g.param(self.init);
        let h0 = g.matmul(h_last, w)?;
        Ok(Pointing { keys, keep, inputs, h0, batch: b, steps: t })
    }

    /// Attention over positions `0..=len_b` for decoder states `h: B × Hp`.
    fn attend(&self, g: &mut Graph, pt: &Pointing, h: Var) -> Result<Var> {
        let w1 = g.param(self.w1);
        let q = g.matmul(h, w1)?;
        let scores = g.batched_dot(q, pt.keys)?;
        Ok(g.masked_softmax_rows(scores, &pt.keep)?)
    }

    /// Teacher-forced mean negative log-likelihood of the gold pointer
    /// targets over all decoder steps of the batch. Documents must be
    /// non-empty.
    pub fn loss(
        &self,
        g: &mut Graph,
        docs: &[&Document],
        gold: &[Vec<AnswerSpan>],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let batch = DocBatch::new(docs, &self.vocab);
        let enc = self.encoder.encode(g, &batch, mode, rng)?;
        let pt = self.pointing(g, &batch, &enc)?;
        let targets: Vec<Vec<usize>> = gold
            .iter()
            .zip(&batch.lengths)
            .map(|(s, &n)| ptrnet_target_sequence(s, n))
            .collect();
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        let count: usize = targets.iter().map(Vec::len).sum();
        let b = pt.batch;
        let mut h = pt.h0;
        let mut c = g.zeros(b, self.config.decoder_hidden);
        let mut total = Vec::with_capacity(steps);
        for j in 0..steps {
            let rows: Vec<usize> = (0..b)
                .map(|r| {
                    let prev = (j > 0).then(|| targets[r].get(j - 1).copied().unwrap_or(0));
                    pt.input_row(r, prev, batch.lengths[r])
                })
                .collect();
            let x = g.select_rows(pt.inputs, &rows)?;
            (h, c) = self.decoder.step(g, x, h, c)?;
            let hd = g.dropout(h, self.config.encoder.dropout, mode, rng)?;
            let p = self.attend(g, &pt, hd)?;
            let tj: Vec<Option<usize>> = targets.iter().map(|t| t.get(j).copied()).collect();
            total.push(g.nll_rows(p, &tj)?);
        }
        let all = g.concat_cols(&total)?;
        let sum = g.sum(all);
        Ok(g.scale(sum, 1.0 / count as f64))
    }

    /// Greedy extraction with at most `max_phrases` pairs.
    pub fn decode(&self, doc: &Document) -> Result<PointerDecode> {
        self.decode_with_limit(doc, self.config.max_phrases)
    }

    pub fn decode_with_limit(&self, doc: &Document, max_phrases: usize) -> Result<PointerDecode> {
        let n = doc.len();
        if n == 0 {
            return Ok(PointerDecode {
                phrases: KeyPhraseSet::default(),
                pointed: Vec::new(),
            });
        }
        let mut g = Graph::new(&self.params);
        let mut rng = RngStream::new(0);
        let batch = DocBatch::new(&[doc], &self.vocab);
        let enc = self.encoder.encode(&mut g, &batch, Mode::Eval, &mut rng)?;
        let pt = self.pointing(&mut g, &batch, &enc)?;
        let mut h = pt.h0;
        let mut c = g.zeros(1, self.config.decoder_hidden);
        greedy_pointer_decode(n, max_phrases, |prev| {
            let x = g.select_rows(pt.inputs, &[pt.input_row(0, prev, n)])?;
            (h, c) = self.decoder.step(&mut g, x, h, c)?;
            let p = self.attend(&mut g, &pt, h)?;
            Ok(g.value(p).data().to_vec())
        })
    }

    /// Attention distributions for a batch under teacher forcing, one
    /// `B × (T+1)` tensor per step, with the keep mask.
    pub fn teacher_forced_distributions(
        &self,
        docs: &[&Document],
        gold: &[Vec<AnswerSpan>],
    ) -> Result<(Vec<autodiff::Tensor>, Vec<bool>)> {
        let mut g = Graph::new(&self.params);
        let mut rng = RngStream::new(0);
        let batch = DocBatch::new(docs, &self.vocab);
        let enc = self.encoder.encode(&mut g, &batch, Mode::Eval, &mut rng)?;
        let pt = self.pointing(&mut g, &batch, &enc)?;
        let targets: Vec<Vec<usize>> = gold
            .iter()
            .zip(&batch.lengths)
            .map(|(s, &n)| ptrnet_target_sequence(s, n))
            .collect();
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        let (mut h, mut c) = (pt.h0, g.zeros(pt.batch, self.config.decoder_hidden));
        let mut out = Vec::new();
        for j in 0..steps {
            let rows: Vec<usize> = (0..pt.batch)
                .map(|r| {
                    let prev = (j > 0).then(|| targets[r].get(j - 1).copied().unwrap_or(0));
                    pt.input_row(r, prev, batch.lengths[r])
                })
                .collect();
            let x = g.select_rows(pt.inputs, &rows)?;
            (h, c) = self.decoder.step(&mut g, x, h, c)?;
            let p = self.attend(&mut g, &pt, h)?;
            out.push(g.value(p).clone());
        }
        Ok((out, pt.keep))
    }
}
