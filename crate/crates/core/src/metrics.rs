//! Token F1, multi-span F1, exact match and corpus BLEU-4.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn counts<S: AsRef<str>>(tokens: &[S]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_ref()).or_insert(0) += 1;
    }
    m
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Bag-of-tokens overlap with multiplicity.
pub fn token_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> TokenF1 {
    if pred.is_empty() || gold.is_empty() {
        return TokenF1 { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let gc = counts(gold);
    let common: usize = counts(pred)
        .iter()
        .map(|(t, &n)| n.min(gc.get(t).copied().unwrap_or(0)))
        .sum();
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    TokenF1 { precision, recall, f1: harmonic(precision, recall) }
}

/// Pairwise score matrix between predicted and gold phrases, max-pooled
/// along each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Matrix {
    /// `scores[i][j]` compares prediction `i` with gold phrase `j`.
    pub scores: Vec<Vec<f64>>,
    pub precisions: Vec<f64>,
    pub recalls: Vec<f64>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub f1_ms: f64,
}

impl F1Matrix {
    fn from_scores(scores: Vec<Vec<f64>>, n_gold: usize) -> Self {
        if scores.is_empty() || n_gold == 0 {
            return F1Matrix {
                precisions: vec![0.0; scores.len()],
                recalls: vec![0.0; n_gold],
                scores,
                mean_precision: 0.0,
                mean_recall: 0.0,
                f1_ms: 0.0,
            };
        }
        let precisions: Vec<f64> = scores.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
        let recalls: Vec<f64> = (0..n_gold)
            .map(|j| scores.iter().map(|r| r[j]).fold(0.0, f64::max))
            .collect();
        let mean_precision = precisions.iter().sum::<f64>() / precisions.len() as f64;
        let mean_recall = recalls.iter().sum::<f64>() / recalls.len() as f64;
        F1Matrix {
            scores,
            precisions,
            recalls,
            mean_precision,
            mean_recall,
            f1_ms: harmonic(mean_precision, mean_recall),
        }
    }
}

pub fn multi_span_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<T>]) -> F1Matrix {
    let scores = pred
        .iter()
        .map(|p| gold.iter().map(|g| token_f1(p, g).f1).collect())
        .collect();
    F1Matrix::from_scores(scores, gold.len())
}

/// The multi-span aggregation over a 0/1 exact-match matrix.
pub fn exact_match_rate<S: AsRef<str>, T: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<T>]) -> F1Matrix {
    let scores = pred
        .iter()
        .map(|p| {
            gold.iter()
                .map(|g| {
                    let same = p.len() == g.len() && p.iter().zip(g).all(|(a, b)| a.as_ref() == b.as_ref());
                    if same { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    F1Matrix::from_scores(scores, gold.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Clipped n-gram precisions for n = 1..4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
    pub score: f64,
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with one reference per candidate and no smoothing.
pub fn bleu4<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::Config("BLEU over an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Config(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in candidates.iter().zip(references) {
        c += cand.len();
        r += reference.len();
        for n in 1..=4 {
            let rc = ngrams(reference, n);
            for (g, k) in ngrams(cand, n) {
                matched[n - 1] += k.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        precisions,
        brevity_penalty,
        candidate_length: c,
        reference_length: r,
        score,
    })
}

/// Per-document multi-span scores and their means over documents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusKeyphraseScores {
    pub documents: usize,
    pub f1_ms: f64,
    pub precision: f64,
    pub recall: f64,
    pub exact_match_f1: f64,
}

impl CorpusKeyphraseScores {
    pub fn from_documents(per_doc: &[(F1Matrix, F1Matrix)]) -> Self {
        let n = per_doc.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(&(F1Matrix, F1Matrix)) -> f64| per_doc.iter().map(f).sum::<f64>() / n as f64;
        CorpusKeyphraseScores {
            documents: n,
            f1_ms: mean(&|d| d.0.f1_ms),
            precision: mean(&|d| d.0.mean_precision),
            recall: mean(&|d| d.0.mean_recall),
            exact_match_f1: mean(&|d| d.1.f1_ms),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ph(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn set(items: &[&str]) -> Vec<Vec<String>> {
        items.iter().map(|s| ph(s)).collect()
    }

    #[test]
    fn token_f1_cases() {
        let t = token_f1(&ph("the cat"), &ph("the cat"));
        assert_eq!((t.precision, t.recall, t.f1), (1.0, 1.0, 1.0));
        let t = token_f1(&ph("the cat sat"), &ph("the cat"));
        assert!((t.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.recall, 1.0);
        assert!((t.f1 - 0.8).abs() < 1e-15);
        let t = token_f1(&ph("a b"), &ph("c d"));
        assert_eq!((t.precision, t.recall, t.f1), (0.0, 0.0, 0.0));
        let t = token_f1(&ph("a a a"), &ph("a"));
        assert!((t.precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn multi_span_cases() {
        assert_eq!(multi_span_f1(&set(&["the cat"]), &set(&["the cat"])).f1_ms, 1.0);
        let m = multi_span_f1(&set(&["a b", "c d"]), &set(&["a b"]));
        assert_eq!(m.mean_precision, 0.5);
        assert_eq!(m.mean_recall, 1.0);
        assert!((m.f1_ms - 2.0 / 3.0).abs() < 1e-15);
        let empty: Vec<Vec<String>> = Vec::new();
        let m = multi_span_f1(&empty, &set(&["x"]));
        assert_eq!((m.f1_ms, m.mean_recall), (0.0, 0.0));
        assert_eq!(multi_span_f1(&set(&["x"]), &empty).f1_ms, 0.0);
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match_rate(&set(&["a b", "c"]), &set(&["a b", "c"])).f1_ms, 1.0);
        let m = exact_match_rate(&set(&["a b", "c d"]), &set(&["a b"]));
        assert_eq!(m.mean_precision, 0.5);
        assert_eq!(exact_match_rate(&set(&["a b c"]), &set(&["a b"])).f1_ms, 0.0);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = set(&["what is the capital of france ?", "who wrote it ?"]);
        let r = bleu4(&c, &c).unwrap();
        assert!((r.score - 1.0).abs() < 1e-15);
        let d = set(&["a b c d", "e f g h"]);
        let e = set(&["w x y z", "p q r s"]);
        assert_eq!(bleu4(&d, &e).unwrap().score, 0.0);
        let none: Vec<Vec<String>> = Vec::new();
        assert!(bleu4(&none, &none).is_err());
    }

    #[test]
    fn corpus_means_over_documents() {
        let a = (multi_span_f1(&set(&["x"]), &set(&["x"])), exact_match_rate(&set(&["x"]), &set(&["x"])));
        let b = (multi_span_f1(&set(&["y"]), &set(&["x"])), exact_match_rate(&set(&["y"]), &set(&["x"])));
        let s = CorpusKeyphraseScores::from_documents(&[a, b]);
        assert_eq!((s.documents, s.f1_ms, s.precision, s.recall), (2, 0.5, 0.5, 0.5));
    }
}
