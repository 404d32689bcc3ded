//! Neural entity selection: scores each candidate entity with an MLP over
//! document and entity summaries and keeps the top `k`.

use std::collections::HashMap;

use autodiff::{Graph, Mode, ParamStore, Parameterized, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{overlaps_any, DocBatch, DocEncoder, EncoderConfig, KeyPhraseSet};
use crate::corpus::{AnswerSpan, Document, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Encoded, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NesConfig {
    pub encoder: EncoderConfig,
    pub mlp_hidden: [usize; 2],
    pub k: usize,
}

impl Default for NesConfig {
    fn default() -> Self {
        NesConfig {
            encoder: EncoderConfig::default(),
            mlp_hidden: [256, 128],
            k: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NesModel {
    pub params: ParamStore,
    pub config: NesConfig,
    pub vocab: Vocabulary,
    pub encoder: DocEncoder,
    pub mlp: Mlp,
}

impl Parameterized for NesModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// `[h_nd; h_avg; h_e]` per `(batch row, entity span)` item: the last real
/// annotation row, the mean of all real rows, and the mean over the span.
pub fn nes_features(g: &mut Graph, enc: &Encoded, items: &[(usize, AnswerSpan)]) -> Result<Var> {
    let b = enc.batch();
    for &(r, s) in items {
        if r >= b || !s.within(enc.lengths[r]) {
            return Err(Error::Index(format!("entity {}..={} outside document {r}", s.start, s.end)));
        }
    }
    let last: Vec<usize> = items.iter().map(|&(r, _)| (enc.lengths[r] - 1) * b + r).collect();
    let all: Vec<Vec<usize>> = items
        .iter()
        .map(|&(r, _)| (0..enc.lengths[r]).map(|t| t * b + r).collect())
        .collect();
    let span: Vec<Vec<usize>> = items
        .iter()
        .map(|&(r, s)| (s.start..=s.end).map(|t| t * b + r).collect())
        .collect();
    let h_nd = g.select_rows(enc.annotations, &last)?;
    let h_avg = g.group_mean_rows(enc.annotations, &all)?;
    let h_e = g.group_mean_rows(enc.annotations, &span)?;
    Ok(g.concat_cols(&[h_nd, h_avg, h_e])?)
}

impl NesModel {
    pub fn new(
        config: NesConfig,
        vocab: Vocabulary,
        pretrained: Option<&HashMap<String, Vec<f64>>>,
        seed: u64,
    ) -> Self {
        let mut rng = RngStream::new(seed);
        let mut params = ParamStore::new();
        let encoder = DocEncoder::new(&mut params, "nes.encoder", &config.encoder, &vocab, pretrained, &mut rng);
        let d = 3 * encoder.output_dim();
        let [h1, h2] = config.mlp_hidden;
        let mlp = Mlp::new(&mut params, "nes.mlp", &[d, h1, h2, 1], &mut rng);
        NesModel { params, config, vocab, encoder, mlp }
    }

    /// Sigmoid output of the MLP for each feature row, `N × 1`.
    pub fn score(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let z = self.mlp.forward(g, features)?;
        Ok(g.sigmoid(z))
    }

    /// Entity probabilities for a batch of documents, `N × 1`, in the
    /// order of `items`.
    pub fn probabilities(
        &self,
        g: &mut Graph,
        docs: &[&Document],
        items: &[(usize, AnswerSpan)],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var> {
        let batch = DocBatch::new(docs, &self.vocab);
        let enc = self.encoder.encode(g, &batch, mode, rng)?;
        let f = nes_features(g, &enc.enc, items)?;
        self.score(g, f)
    }

    /// Mean binary cross-entropy over every candidate of every document;
    /// `None` when the batch has no candidates.
    pub fn loss(
        &self,
        g: &mut Graph,
        docs: &[&Document],
        entities: &[Vec<AnswerSpan>],
        gold: &[Vec<AnswerSpan>],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Option<Var>> {
        let mut items = Vec::new();
        let mut labels = Vec::new();
        for (r, ents) in entities.iter().enumerate() {
            for &e in ents {
                items.push((r, e));
                labels.push(Some(overlaps_any(e, &gold[r]) as usize));
            }
        }
        if items.is_empty() {
            return Ok(None);
        }
        let p = self.probabilities(g, docs, &items, mode, rng)?;
        let q = g.one_minus(p);
        let two = g.concat_cols(&[q, p])?;
        let nll = g.nll_rows(two, &labels)?;
        Ok(Some(g.scale(nll, 1.0 / items.len() as f64)))
    }

    /// The `min(k, n)` highest-probability entities.
    pub fn select_topk(&self, doc: &Document, entities: &[AnswerSpan]) -> Result<KeyPhraseSet> {
        let ents: Vec<AnswerSpan> = KeyPhraseSet::from_spans(entities.iter().copied()).spans().to_vec();
        if ents.is_empty() || doc.is_empty() {
            return Ok(KeyPhraseSet::default());
        }
        let mut g = Graph::new(&self.params);
        let items: Vec<(usize, AnswerSpan)> = ents.iter().map(|&e| (0, e)).collect();
        let p = self.probabilities(&mut g, &[doc], &items, Mode::Eval, &mut RngStream::new(0))?;
        let scores = g.value(p).data().to_vec();
        Ok(top_k(&ents, &scores, self.config.k))
    }
}

/// Highest scores first; ties go to the earlier start, then the shorter span.
pub fn top_k(spans: &[AnswerSpan], scores: &[f64], k: usize) -> KeyPhraseSet {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(spans[a].start.cmp(&spans[b].start))
            .then(spans[a].len().cmp(&spans[b].len()))
    });
    KeyPhraseSet::from_spans(order.into_iter().take(k).map(|i| spans[i]))
}

/// Overwrites every parameter with zeros.
pub fn zero_params(ps: &mut ParamStore) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let (r, c) = ps.get(id).shape();
        ps.set(id, Tensor::zeros(r, c)).expect("same shape");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_loss, randomize_params, GRADCHECK_SCALE};
    use autodiff::GradCheckOptions;

    fn toy_config() -> NesConfig {
        NesConfig {
            encoder: EncoderConfig { word_dim: 3, hidden: 2, dropout: 0.0 },
            mlp_hidden: [4, 3],
            k: 6,
        }
    }

    fn toy(seed: u64) -> (NesModel, Document) {
        let doc = Document::new("William Smith met Ann Lee in 1967");
        let vocab = Vocabulary::build([doc.tokens().to_vec()], 100);
        (NesModel::new(toy_config(), vocab, None, seed), doc)
    }

    fn constant_encoded(g: &mut Graph, rows: &[&[f64]], lengths: Vec<usize>) -> Encoded {
        let a = g.constant(Tensor::from_rows(rows));
        Encoded { annotations: a, final_fwd: a, final_bwd: a, steps: rows.len() / lengths.len(), lengths }
    }

    #[test]
    fn features_match_scripted_means() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let enc = constant_encoded(&mut g, &[&[1.0, 2.0], &[3.0, 6.0]], vec![2]);
        let f = nes_features(&mut g, &enc, &[(0, AnswerSpan::new(0, 0)), (0, AnswerSpan::new(0, 1))]).unwrap();
        assert_eq!(g.value(f).row(0), [3.0, 6.0, 2.0, 4.0, 1.0, 2.0]);
        assert_eq!(g.value(f).row(1), [3.0, 6.0, 2.0, 4.0, 2.0, 4.0]);
    }

    #[test]
    fn single_token_document_features_are_equal_parts() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let enc = constant_encoded(&mut g, &[&[0.5, -1.5]], vec![1]);
        let f = nes_features(&mut g, &enc, &[(0, AnswerSpan::new(0, 0))]).unwrap();
        assert_eq!(g.value(f).row(0), [0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn zero_mlp_scores_one_half_and_loss_is_ln2() {
        let (mut m, doc) = toy(1);
        zero_params(&mut m.params);
        let ents = vec![AnswerSpan::new(0, 1), AnswerSpan::new(3, 4)];
        let mut g = Graph::new(&m.params);
        let items: Vec<_> = ents.iter().map(|&e| (0, e)).collect();
        let p = m.probabilities(&mut g, &[&doc], &items, Mode::Eval, &mut RngStream::new(0)).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.5));
        let l = m
            .loss(&mut g, &[&doc], &[ents], &[vec![AnswerSpan::new(1, 1)]], Mode::Eval, &mut RngStream::new(0))
            .unwrap()
            .unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn scripted_monotone_mlp() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::new(0);
        let mlp = Mlp::new(&mut ps, "m", &[1, 1, 1, 1], &mut rng);
        let vals = [(2.0, 0.5), (1.5, -0.1), (3.0, 0.2)];
        for (l, &(w, b)) in mlp.layers.iter().zip(&vals) {
            ps.set(l.w, Tensor::scalar(w)).unwrap();
            ps.set(l.b.unwrap(), Tensor::scalar(b)).unwrap();
        }
        let oracle = |x: f64| {
            let h1 = (2.0 * x + 0.5f64).tanh();
            let h2 = (1.5 * h1 - 0.1f64).tanh();
            1.0 / (1.0 + (-(3.0 * h2 + 0.2)).exp())
        };
        let mut prev = 0.0;
        for i in 0..21 {
            let x = -2.0 + 0.2 * i as f64;
            let mut g = Graph::new(&ps);
            let xv = g.constant(Tensor::scalar(x));
            let z = mlp.forward(&mut g, xv).unwrap();
            let p = g.sigmoid(z);
            let v = g.value(p).data()[0];
            assert!((v - oracle(x)).abs() < 1e-14);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn scores_stay_in_open_unit_interval() {
        let mut rng = RngStream::new(9);
        let (m, _) = toy(2);
        for _ in 0..1000 {
            let f: Vec<f64> = (0..12).map(|_| rng.normal() * 5.0).collect();
            let mut g = Graph::new(&m.params);
            let x = g.constant(Tensor::row_vector(&f));
            let p = m.score(&mut g, x).unwrap();
            let v = g.value(p).data()[0];
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn topk_counts_and_ties() {
        let spans: Vec<AnswerSpan> = (0..10).map(|i| AnswerSpan::new(i, i)).collect();
        let scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let s = top_k(&spans, &scores, 6);
        assert_eq!(s.len(), 6);
        assert_eq!(s.spans()[0], AnswerSpan::new(4, 4));
        assert_eq!(top_k(&spans[..3], &scores[..3], 6).len(), 3);
        let tied = [AnswerSpan::new(5, 5), AnswerSpan::new(2, 3), AnswerSpan::new(2, 2)];
        assert_eq!(top_k(&tied, &[1.0, 1.0, 1.0], 1).spans(), [AnswerSpan::new(2, 2)]);
        assert_eq!(top_k(&tied[..2], &[1.0, 1.0], 1).spans(), [AnswerSpan::new(2, 3)]);
    }

    #[test]
    fn select_topk_returns_subset() {
        let (m, doc) = toy(3);
        let ents: Vec<AnswerSpan> = (0..7).map(|i| AnswerSpan::new(i, i)).collect();
        let s = m.select_topk(&doc, &ents).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.spans().iter().all(|x| ents.contains(x)));
    }

    #[test]
    fn full_loss_passes_gradcheck() {
        let (mut m, doc) = toy(4);
        randomize_params(&mut m.params, GRADCHECK_SCALE, 40);
        let ents = vec![AnswerSpan::new(0, 1), AnswerSpan::new(3, 4), AnswerSpan::new(6, 6)];
        let gold = vec![AnswerSpan::new(3, 4)];
        let report = check_loss(
            &mut m,
            |m, g| {
                let l = m.loss(g, &[&doc], std::slice::from_ref(&ents), std::slice::from_ref(&gold), Mode::Eval, &mut RngStream::new(0))?;
                Ok(l.expect("entities"))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }
}
