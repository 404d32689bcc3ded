use std::collections::HashMap;
use std::fs;
use std::path::Path;

use autodiff::{Graph, ParamId, ParamStore, RngStream, Tensor, Var};

use super::lstm::{BiLstm, RecurrentDropout};
use crate::corpus::vocab::{CharVocabulary, Vocabulary};
use crate::error::{Error, Result};

/// Range of the uniform initialization used for words without a
/// pretrained vector.
pub const EMBED_INIT: f64 = 0.05;

/// Reads `token v1 … vd` lines. Blank lines are skipped; every other line
/// must carry exactly `dim` finite numbers.
pub fn read_embedding_file(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::EmbeddingFormat {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>().map_err(|_| bad(n, format!("not a number: {p:?}"))))
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(bad(n, format!("expected {dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(n, "non-finite value".into()));
        }
        out.insert(token.to_string(), values);
    }
    Ok(out)
}

/// A `|vocab| × dim` table: rows from `pretrained` where available, else
/// uniform(−0.05, 0.05). The PAD row is zero.
pub fn embedding_table(
    vocab: &Vocabulary,
    dim: usize,
    pretrained: Option<&HashMap<String, Vec<f64>>>,
    rng: &mut RngStream,
) -> Tensor {
    let mut t = Tensor::zeros(vocab.len(), dim);
    for id in 0..vocab.len() {
        let row = t.row_mut(id);
        for v in row.iter_mut() {
            *v = rng.uniform_range(-EMBED_INIT, EMBED_INIT);
        }
        if id == crate::corpus::PAD {
            row.fill(0.0);
        } else if let Some(vec) = pretrained.and_then(|p| p.get(vocab.token(id))) {
            row.copy_from_slice(vec);
        }
    }
    t
}

/// Character BiLSTM producing one vector per token from its final states.
#[derive(Debug, Clone)]
pub struct CharEncoder {
    pub table: ParamId,
    pub lstm: BiLstm,
}

impl CharEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, n_chars: usize, char_emb: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let table = ps.add_uniform(format!("{name}.table"), n_chars, char_emb, EMBED_INIT, rng);
        let lstm = BiLstm::new(ps, &format!("{name}.lstm"), char_emb, hidden, rng);
        CharEncoder { table, lstm }
    }

    pub fn output_dim(&self) -> usize {
        self.lstm.output_dim()
    }

    /// `N × 2h`: `[final forward; final backward]` over each char sequence.
    /// Empty sequences map to zero rows.
    pub fn encode(&self, g: &mut Graph, chars: &[Vec<usize>]) -> Result<Var> {
        let n = chars.len();
        let lengths: Vec<usize> = chars.iter().map(Vec::len).collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        if steps == 0 {
            return Ok(g.zeros(n, self.output_dim()));
        }
        let mut ids = vec![0; steps * n];
        for (b, seq) in chars.iter().enumerate() {
            for (t, &c) in seq.iter().enumerate() {
                ids[t * n + b] = c;
            }
        }
        let table = g.param(self.table);
        let x = g.select_rows(table, &ids)?;
        let none = RecurrentDropout::none();
        let enc = self.lstm.encode(g, x, &lengths, &none, &none)?;
        enc.final_state(g)
    }
}

/// Word embedding, optionally joined with a character encoding.
#[derive(Debug, Clone)]
pub struct WordRep {
    pub table: ParamId,
    pub word_dim: usize,
    pub chars: Option<CharEncoder>,
}

impl WordRep {
    pub fn output_dim(&self) -> usize {
        self.word_dim + self.chars.as_ref().map_or(0, CharEncoder::output_dim)
    }

    /// One row per `(word id, char ids)` pair.
    pub fn represent(&self, g: &mut Graph, words: &[usize], chars: &[Vec<usize>]) -> Result<Var> {
        let table = g.param(self.table);
        let w = g.select_rows(table, words)?;
        match &self.chars {
            None => Ok(w),
            Some(ce) => {
                let c = ce.encode(g, chars)?;
                Ok(g.concat_cols(&[w, c])?)
            }
        }
    }

    /// Representations for a sequence of tokens, computing each distinct
    /// token once.
    pub fn represent_tokens(&self, g: &mut Graph, tokens: &[TokenIds]) -> Result<Var> {
        let mut unique: Vec<&TokenIds> = Vec::new();
        let mut slot: HashMap<&TokenIds, usize> = HashMap::new();
        let mut index = Vec::with_capacity(tokens.len());
        for t in tokens {
            let k = *slot.entry(t).or_insert_with(|| {
                unique.push(t);
                unique.len() - 1
            });
            index.push(k);
        }
        let words: Vec<usize> = unique.iter().map(|t| t.word).collect();
        let chars: Vec<Vec<usize>> = unique.iter().map(|t| t.chars.clone()).collect();
        let reps = self.represent(g, &words, &chars)?;
        Ok(g.select_rows(reps, &index)?)
    }
}

/// Word id and character ids of one token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenIds {
    pub word: usize,
    pub chars: Vec<usize>,
}

impl TokenIds {
    pub fn of(token: &str, words: &Vocabulary, chars: Option<&CharVocabulary>) -> Self {
        TokenIds {
            word: words.id(token),
            chars: chars.map(|c| c.ids(token)).unwrap_or_default(),
        }
    }

    /// A reserved symbol: word id only, no characters.
    pub fn reserved(id: usize) -> Self {
        TokenIds { word: id, chars: Vec::new() }
    }
}
