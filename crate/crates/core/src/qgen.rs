//! Attention-based question generator with a pointer-softmax decoder.
//!
//! Each decoding step runs, in order: document attention `α` from the
//! previous first-cell state `s1`, context vector `v = Σ α_i h^d_i`, cell
//! `c1` on the previous output embedding and previous `s2`, cell `c2` on `v`
//! and the new `s1`, the generative distribution `o`, the switch `s`, and the
//! mixture `[s·α ; (1−s)·o]` over document positions followed by the
//! decoder vocabulary.

use std::collections::HashMap;

use autodiff::tensor::argmax;
use autodiff::{Graph, Mode, ParamId, ParamStore, Parameterized, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, CharVocabulary, Document, Vocabulary, EOS, PAD, SOS, UNK};
use crate::error::{Error, Result};
use crate::nn::linear::glorot;
use crate::nn::{
    answer_condition_encode, embedding_table, BiLstm, CharEncoder, Linear, LstmCell, RecurrentDropout, TokenIds,
    WordRep,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QgenConfig {
    pub word_dim: usize,
    pub char_embedding_dim: usize,
    /// Character BiLSTM units per direction.
    pub char_hidden: usize,
    /// Document annotation size (both directions together).
    pub encoder_hidden: usize,
    /// Aggregation BiLSTM units per direction.
    pub aggregation_hidden: usize,
    pub decoder_hidden: usize,
    pub attention_hidden: usize,
    pub generator_hidden: usize,
    pub dropout: f64,
    pub max_decode_length: usize,
}

impl Default for QgenConfig {
    fn default() -> Self {
        QgenConfig {
            word_dim: 300,
            char_embedding_dim: 32,
            char_hidden: 16,
            encoder_hidden: 384,
            aggregation_hidden: 192,
            decoder_hidden: 384,
            attention_hidden: 384,
            generator_hidden: 384,
            dropout: 0.3,
            max_decode_length: 30,
        }
    }
}

/// Vocabularies a question generator is built against.
#[derive(Debug, Clone, PartialEq)]
pub struct QgenVocabs {
    /// Document and question words for the input embedding table.
    pub input: Vocabulary,
    pub chars: CharVocabulary,
    /// Output vocabulary of the generative distribution.
    pub decoder: Vocabulary,
}

impl QgenVocabs {
    /// Builds all three vocabularies from training documents and questions.
    pub fn build(docs: &[&Document], questions: &[&[String]], input_size: usize, decoder_size: usize) -> Self {
        let mut input_streams: Vec<Vec<String>> = docs.iter().map(|d| d.tokens().to_vec()).collect();
        input_streams.extend(questions.iter().map(|q| q.to_vec()));
        let input = Vocabulary::build(input_streams.iter(), input_size);
        let chars = CharVocabulary::build(input_streams.iter().flatten());
        let decoder = Vocabulary::build(questions.iter().map(|q| q.to_vec()), decoder_size);
        QgenVocabs { input, chars, decoder }
    }

    pub fn token_ids(&self, token: &str) -> TokenIds {
        TokenIds::of(token, &self.input, Some(&self.chars))
    }
}

#[derive(Debug, Clone)]
pub struct Highway {
    pub gate: Linear,
    pub transform: Linear,
}

impl Highway {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut RngStream) -> Self {
        Highway {
            gate: Linear::new(ps, &format!("{name}.gate"), dim, dim, true, rng),
            transform: Linear::new(ps, &format!("{name}.transform"), dim, dim, true, rng),
        }
    }

    /// `gate · tanh(affine(x)) + (1 − gate) · x`, `gate = σ(affine(x))`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gz = self.gate.forward(g, x)?;
        let gate = g.sigmoid(gz);
        let tz = self.transform.forward(g, x)?;
        let t = g.tanh(tz);
        let carry = g.one_minus(gate);
        let a = g.mul(gate, t)?;
        let b = g.mul(carry, x)?;
        Ok(g.add(a, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct QgenModel {
    pub params: ParamStore,
    pub config: QgenConfig,
    pub vocabs: QgenVocabs,
    pub rep: WordRep,
    pub encoder: BiLstm,
    pub aggregation: BiLstm,
    pub init: Linear,
    pub c1: LstmCell,
    pub c2: LstmCell,
    pub att_doc: Linear,
    pub att_query: Linear,
    pub att_out: ParamId,
    pub gen_hidden: Linear,
    pub gen_out: Linear,
    pub highway: [Highway; 2],
    pub switch_out: Linear,
}

impl Parameterized for QgenModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Recurrent state of the two decoder cells.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub s1_h: Var,
    pub s1_c: Var,
    pub s2_h: Var,
    pub s2_c: Var,
}

/// Everything computed at one decoding step, `B` rows each.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub alpha: Var,
    pub v: Var,
    pub o: Var,
    pub s: Var,
    pub mixed: Var,
    pub state: DecoderState,
}

/// Encoded documents and answers for a batch.
#[derive(Debug, Clone)]
pub struct QgenContext {
    /// `(T·B) × D`, time-major.
    pub annotations: Var,
    /// `annotations · W` for the document part of the attention layer.
    pub annotations_proj: Var,
    /// `B × d_a`.
    pub answer: Var,
    /// Row-major `B × T`: real document positions.
    pub keep: Vec<bool>,
    pub lengths: Vec<usize>,
    pub steps: usize,
    pub init: DecoderState,
}

impl QgenContext {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// A document, an answer span inside it, and optionally the gold question.
#[derive(Debug, Clone, Copy)]
pub struct QgenExample<'a> {
    pub doc: &'a Document,
    pub span: AnswerSpan,
    pub question: &'a [String],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Copied(usize),
    Generated(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub tokens: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub stop_reason: StopReason,
}

/// Token-level accounting of a loss computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossStats {
    pub tokens: usize,
    /// Gold tokens found neither in the document nor in the decoder
    /// vocabulary; their likelihood is the UNK mass.
    pub unk_fallback: usize,
}

/// `[s·α ; (1−s)·o]` row by row.
pub fn pointer_softmax_mix(g: &mut Graph, alpha: Var, o: Var, s: Var) -> Result<Var> {
    let a = g.mul_col(alpha, s)?;
    let r = g.one_minus(s);
    let b = g.mul_col(o, r)?;
    Ok(g.concat_cols(&[a, b])?)
}

/// Columns of a mixed row that carry probability for `gold`: every document
/// position holding it, plus its decoder-vocabulary entry. A token in
/// neither place maps to the UNK entry and the flag is set.
pub fn likelihood_columns(doc_tokens: &[String], doc_cols: usize, gold: &str, decoder: &Vocabulary) -> (Vec<usize>, bool) {
    let mut cols: Vec<usize> = doc_tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_str() == gold)
        .map(|(i, _)| i)
        .collect();
    let in_doc = !cols.is_empty();
    let fallback = match decoder.get(gold) {
        Some(id) => {
            cols.push(doc_cols + id);
            false
        }
        None if in_doc => false,
        None => {
            cols.push(doc_cols + UNK);
            true
        }
    };
    (cols, fallback)
}

/// Probability of `gold` under one mixed row.
pub fn token_likelihood(mixed: &[f64], doc_tokens: &[String], gold: &str, decoder: &Vocabulary) -> (f64, bool) {
    let doc_cols = mixed.len() - decoder.len();
    let (cols, flag) = likelihood_columns(doc_tokens, doc_cols, gold, decoder);
    (cols.iter().map(|&c| mixed[c]).sum(), flag)
}

/// Greedy decoding over mixed rows. `next(prev)` returns the mixed row for
/// the step after emitting `prev` (`None` at the first step); the first
/// `doc_tokens.len()` entries are document positions.
pub fn greedy_mixed_decode<F>(
    doc_tokens: &[String],
    decoder: &Vocabulary,
    max_len: usize,
    mut next: F,
) -> Result<GeneratedQuestion>
where
    F: FnMut(Option<&str>) -> Result<Vec<f64>>,
{
    let n = doc_tokens.len();
    let mut tokens: Vec<String> = Vec::new();
    let mut provenance = Vec::new();
    let mut stop_reason = StopReason::MaxLength;
    for _ in 0..=max_len {
        let row = next(tokens.last().map(String::as_str))?;
        let k = argmax(&row);
        let (tok, prov) = if k < n {
            (doc_tokens[k].clone(), Provenance::Copied(k))
        } else {
            let id = k - n;
            if id == EOS {
                stop_reason = StopReason::Eos;
                break;
            }
            (decoder.token(id).to_string(), Provenance::Generated(id))
        };
        if tokens.len() == max_len {
            break;
        }
        tokens.push(tok);
        provenance.push(prov);
    }
    Ok(GeneratedQuestion {
        tokens,
        provenance,
        stop_reason,
    })
}

impl QgenModel {
    pub fn new(
        config: QgenConfig,
        vocabs: QgenVocabs,
        pretrained: Option<&HashMap<String, Vec<f64>>>,
        seed: u64,
    ) -> Self {
        let c = &config;
        let mut rng = RngStream::new(seed);
        let mut ps = ParamStore::new();
        let table = ps.add("qg.words", embedding_table(&vocabs.input, c.word_dim, pretrained, &mut rng));
        let chars = CharEncoder::new(&mut ps, "qg.chars", vocabs.chars.len(), c.char_embedding_dim, c.char_hidden, &mut rng);
        let rep = WordRep {
            table,
            word_dim: c.word_dim,
            chars: Some(chars),
        };
        let r = rep.output_dim();
        let encoder = BiLstm::new(&mut ps, "qg.encoder", r, c.encoder_hidden / 2, &mut rng);
        let d = encoder.output_dim();
        let aggregation = BiLstm::new(&mut ps, "qg.aggregation", d, c.aggregation_hidden, &mut rng);
        let da = aggregation.output_dim() + d;
        let hd = c.decoder_hidden;
        let init = Linear::new(&mut ps, "qg.init", d + da, hd, true, &mut rng);
        let c1 = LstmCell::new(&mut ps, "qg.c1", r, hd, &mut rng);
        let c2 = LstmCell::new(&mut ps, "qg.c2", d, hd, &mut rng);
        let ha = c.attention_hidden;
        let att_doc = Linear::new(&mut ps, "qg.att.doc", d, ha, false, &mut rng);
        let att_query = Linear::new(&mut ps, "qg.att.query", da + hd, ha, true, &mut rng);
        let att_out = ps.add_uniform("qg.att.out", ha, 1, glorot(ha, 1), &mut rng);
        let v = vocabs.decoder.len();
        let gen_hidden = Linear::new(&mut ps, "qg.gen.hidden", r + hd + d + da, c.generator_hidden, true, &mut rng);
        let gen_out = Linear::new(&mut ps, "qg.gen.out", c.generator_hidden, v, true, &mut rng);
        let x0 = hd + d + 2;
        let highway = [
            Highway::new(&mut ps, "qg.switch.0", x0, &mut rng),
            Highway::new(&mut ps, "qg.switch.1", x0, &mut rng),
        ];
        let switch_out = Linear::new(&mut ps, "qg.switch.out", x0 + 2, 1, true, &mut rng);
        QgenModel {
            params: ps,
            config,
            vocabs,
            rep,
            encoder,
            aggregation,
            init,
            c1,
            c2,
            att_doc,
            att_query,
            att_out,
            gen_hidden,
            gen_out,
            highway,
            switch_out,
        }
    }

    pub fn annotation_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Encodes documents and answers and sets up the initial decoder state.
    pub fn encode(&self, g: &mut Graph, batch: &[QgenExample], mode: Mode, rng: &mut RngStream) -> Result<QgenContext> {
        let b = batch.len();
        let lengths: Vec<usize> = batch.iter().map(|e| e.doc.len()).collect();
        if lengths.contains(&0) {
            return Err(Error::Index("empty document".into()));
        }
        let t = lengths.iter().copied().max().unwrap_or(0);
        let mut toks = vec![TokenIds::reserved(PAD); t * b];
        for (r, e) in batch.iter().enumerate() {
            for (i, w) in e.doc.tokens().iter().enumerate() {
                toks[i * b + r] = self.vocabs.token_ids(w);
            }
        }
        let reps = self.rep.represent_tokens(g, &toks)?;
        let reps = g.dropout(reps, self.config.dropout, mode, rng)?;
        let h = self.encoder.hidden();
        let df = RecurrentDropout::new(b, h, self.config.dropout, mode, rng);
        let db = RecurrentDropout::new(b, h, self.config.dropout, mode, rng);
        let enc = self.encoder.encode(g, reps, &lengths, &df, &db)?;
        let spans: Vec<AnswerSpan> = batch.iter().map(|e| e.span).collect();
        let answer = answer_condition_encode(g, &enc, &spans, &self.aggregation)?;
        let last: Vec<usize> = lengths.iter().map(|l| l - 1).collect();
        let h_last = enc.rows_at(g, &last)?;
        let init_in = g.concat_cols(&[h_last, answer])?;
        let s2_h = self.init.forward(g, init_in)?;
        let hd = self.config.decoder_hidden;
        let zero = g.zeros(b, hd);
        let annotations_proj = self.att_doc.forward(g, enc.annotations)?;
        let mut keep = vec![false; b * t];
        for (r, &l) in lengths.iter().enumerate() {
            keep[r * t..r * t + l].fill(true);
        }
        Ok(QgenContext {
            annotations: enc.annotations,
            annotations_proj,
            answer,
            keep,
            lengths,
            steps: t,
            init: DecoderState {
                s1_h: zero,
                s1_c: zero,
                s2_h,
                s2_c: zero,
            },
        })
    }

    /// Document attention from the answer encoding and the previous `s1`.
    pub fn attention_alpha(&self, g: &mut Graph, ctx: &QgenContext, s1_prev: Var) -> Result<Var> {
        let q_in = g.concat_cols(&[ctx.answer, s1_prev])?;
        let q = self.att_query.forward(g, q_in)?;
        let pre = g.block_add(ctx.annotations_proj, q)?;
        let hidden = g.tanh(pre);
        let w = g.param(self.att_out);
        let scores = g.matmul(hidden, w)?;
        let grid = g.reshape(scores, ctx.steps, ctx.batch())?;
        let rows = g.transpose(grid);
        Ok(g.masked_softmax_rows(rows, &ctx.keep)?)
    }

    /// `v = Σ_i α_i h^d_i` per batch row.
    pub fn context_vector(&self, g: &mut Graph, ctx: &QgenContext, alpha: Var) -> Result<Var> {
        Ok(g.batched_weighted_sum(alpha, ctx.annotations)?)
    }

    /// `s1 = c1(y, s2_prev)`, then `s2 = c2(v, s1)`.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        state: &DecoderState,
        y_prev: Var,
        v: Var,
        recurrent: &RecurrentDropout,
    ) -> Result<DecoderState> {
        let s2_in = recurrent.apply(g, state.s2_h)?;
        let (s1_h, s1_c) = self.c1.step(g, y_prev, s2_in, state.s2_c)?;
        let (s2_h, s2_c) = self.c2.step(g, v, s1_h, s1_c)?;
        Ok(DecoderState { s1_h, s1_c, s2_h, s2_c })
    }

    /// Softmax over the decoder vocabulary with PAD and SOS excluded.
    pub fn generative_distribution(&self, g: &mut Graph, y_prev: Var, s2: Var, v: Var, answer: Var) -> Result<Var> {
        let x = g.concat_cols(&[y_prev, s2, v, answer])?;
        let hz = self.gen_hidden.forward(g, x)?;
        let h = g.tanh(hz);
        let logits = self.gen_out.forward(g, h)?;
        let (b, n) = g.shape(logits);
        let keep: Vec<bool> = (0..b * n).map(|k| !matches!(k % n, PAD | SOS)).collect();
        Ok(g.masked_softmax_rows(logits, &keep)?)
    }

    /// Two highway layers over `[s2; v; max α; max o]`, then a sigmoid
    /// layer over that output joined with the entropies `H(α)` and `H(o)`.
    pub fn switch_scalar(&self, g: &mut Graph, s2: Var, v: Var, alpha: Var, o: Var) -> Result<Var> {
        let ma = g.max_cols(alpha)?;
        let mo = g.max_cols(o)?;
        let mut x = g.concat_cols(&[s2, v, ma, mo])?;
        for hw in &self.highway {
            x = hw.forward(g, x)?;
        }
        let ha = g.entropy_rows(alpha)?;
        let ho = g.entropy_rows(o)?;
        let z_in = g.concat_cols(&[x, ha, ho])?;
        let z = self.switch_out.forward(g, z_in)?;
        Ok(g.sigmoid(z))
    }

    /// One full decoding step.
    pub fn step(
        &self,
        g: &mut Graph,
        ctx: &QgenContext,
        state: &DecoderState,
        y_prev: Var,
        recurrent: &RecurrentDropout,
    ) -> Result<StepOutput> {
        let alpha = self.attention_alpha(g, ctx, state.s1_h)?;
        let v = self.context_vector(g, ctx, alpha)?;
        let next = self.decoder_step(g, state, y_prev, v, recurrent)?;
        let o = self.generative_distribution(g, y_prev, next.s2_h, v, ctx.answer)?;
        let s = self.switch_scalar(g, next.s2_h, v, alpha, o)?;
        let mixed = pointer_softmax_mix(g, alpha, o, s)?;
        Ok(StepOutput {
            alpha,
            v,
            o,
            s,
            mixed,
            state: next,
        })
    }

    /// Teacher-forced outputs for every step. Step `j` consumes SOS or the
    /// `j`-th gold token and predicts the next one, EOS last.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        batch: &[QgenExample],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(QgenContext, Vec<StepOutput>)> {
        let ctx = self.encode(g, batch, mode, rng)?;
        let b = batch.len();
        let steps = batch.iter().map(|e| e.question.len() + 1).max().unwrap_or(0);
        let mut toks = vec![TokenIds::reserved(PAD); steps * b];
        for (r, e) in batch.iter().enumerate() {
            toks[r] = TokenIds::reserved(SOS);
            for (j, w) in e.question.iter().enumerate() {
                toks[(j + 1) * b + r] = self.vocabs.token_ids(w);
            }
        }
        let ys = self.rep.represent_tokens(g, &toks)?;
        let ys = g.dropout(ys, self.config.dropout, mode, rng)?;
        let recurrent = RecurrentDropout::new(b, self.config.decoder_hidden, self.config.dropout, mode, rng);
        let mut state = ctx.init;
        let mut outs = Vec::with_capacity(steps);
        for j in 0..steps {
            let rows: Vec<usize> = (j * b..(j + 1) * b).collect();
            let y = g.select_rows(ys, &rows)?;
            let out = self.step(g, &ctx, &state, y, &recurrent)?;
            state = out.state;
            outs.push(out);
        }
        Ok((ctx, outs))
    }

    /// Mean negative log-likelihood per gold token (EOS included).
    pub fn loss(
        &self,
        g: &mut Graph,
        batch: &[QgenExample],
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<(Var, LossStats)> {
        let (ctx, outs) = self.teacher_forced(g, batch, mode, rng)?;
        let mut stats = LossStats::default();
        let mut terms = Vec::with_capacity(outs.len());
        for (j, out) in outs.iter().enumerate() {
            let mut cols = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for e in batch {
                let gold = match j.cmp(&e.question.len()) {
                    std::cmp::Ordering::Less => Some(e.question[j].as_str()),
                    std::cmp::Ordering::Equal => Some(crate::corpus::vocab::RESERVED[EOS]),
                    std::cmp::Ordering::Greater => None,
                };
                match gold {
                    Some(w) => {
                        let (c, flag) = likelihood_columns(e.doc.tokens(), ctx.steps, w, &self.vocabs.decoder);
                        stats.tokens += 1;
                        stats.unk_fallback += flag as usize;
                        cols.push(c);
                        targets.push(Some(0));
                    }
                    None => {
                        cols.push(Vec::new());
                        targets.push(None);
                    }
                }
            }
            let p = g.gather_sum(out.mixed, &cols)?;
            terms.push(g.nll_rows(p, &targets)?);
        }
        let all = g.concat_cols(&terms)?;
        let sum = g.sum(all);
        Ok((g.scale(sum, 1.0 / stats.tokens.max(1) as f64), stats))
    }

    /// Greedy decoding of one question.
    pub fn greedy_decode(&self, doc: &Document, span: AnswerSpan, max_len: usize) -> Result<GeneratedQuestion> {
        let mut g = Graph::new(&self.params);
        let mut rng = RngStream::new(0);
        let ex = QgenExample { doc, span, question: &[] };
        let ctx = self.encode(&mut g, &[ex], Mode::Eval, &mut rng)?;
        let none = RecurrentDropout::none();
        let mut state = ctx.init;
        greedy_mixed_decode(doc.tokens(), &self.vocabs.decoder, max_len, |prev| {
            let ids = match prev {
                None => TokenIds::reserved(SOS),
                Some(w) => self.vocabs.token_ids(w),
            };
            let y = self.rep.represent_tokens(&mut g, &[ids])?;
            let out = self.step(&mut g, &ctx, &state, y, &none)?;
            state = out.state;
            Ok(g.value(out.mixed).data().to_vec())
        })
    }

    /// Step outputs as plain tensors for inspection.
    pub fn step_values(g: &Graph, out: &StepOutput) -> [Tensor; 4] {
        [
            g.value(out.alpha).clone(),
            g.value(out.o).clone(),
            g.value(out.s).clone(),
            g.value(out.mixed).clone(),
        ]
    }
}
