use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use crate::error::{Error, Result};

/// Inclusive token interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct AnswerSpan {
    pub start: usize,
    pub end: usize,
}

impl AnswerSpan {
    pub fn new(start: usize, end: usize) -> Self {
        AnswerSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when the two token intervals share at least one token.
    pub fn overlaps(&self, other: &AnswerSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn within(&self, n_tokens: usize) -> bool {
        self.start <= self.end && self.end < n_tokens
    }
}

impl From<AnswerSpan> for [usize; 2] {
    fn from(s: AnswerSpan) -> Self {
        [s.start, s.end]
    }
}

impl From<[usize; 2]> for AnswerSpan {
    fn from(a: [usize; 2]) -> Self {
        AnswerSpan::new(a[0], a[1])
    }
}

/// A tokenized text together with the character offsets of its tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    raw: String,
    tokens: Vec<String>,
    offsets: Vec<(usize, usize)>,
    char_to_byte: Vec<usize>,
}

impl Document {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let toks = tokenize(&raw);
        let mut char_to_byte: Vec<usize> = raw.char_indices().map(|(b, _)| b).collect();
        char_to_byte.push(raw.len());
        Document {
            tokens: toks.iter().map(|t| t.text.clone()).collect(),
            offsets: toks.iter().map(|t| (t.start, t.end)).collect(),
            raw,
            char_to_byte,
        }
    }

    /// A document whose raw text is the given tokens joined by spaces.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let joined = tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        Document::new(joined)
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Character offsets `(start, end)` of each token, end exclusive.
    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    pub fn char_len(&self) -> usize {
        self.char_to_byte.len() - 1
    }

    /// The raw text between two character offsets.
    pub fn raw_slice(&self, start: usize, end: usize) -> &str {
        &self.raw[self.char_to_byte[start]..self.char_to_byte[end]]
    }

    /// Token `i` with its original casing.
    pub fn raw_token(&self, i: usize) -> &str {
        let (s, e) = self.offsets[i];
        self.raw_slice(s, e)
    }

    pub fn span_tokens(&self, span: AnswerSpan) -> &[String] {
        &self.tokens[span.start..=span.end]
    }

    pub fn span_text(&self, span: AnswerSpan) -> String {
        self.span_tokens(span).join(" ")
    }

    /// Smallest token interval whose character extent covers
    /// `[char_start, char_start + char_len)`. The boolean is true when the
    /// range had to be widened to token boundaries.
    pub fn align_char_span(&self, char_start: usize, char_len: usize) -> Result<(AnswerSpan, bool)> {
        let char_end = char_start + char_len.max(1);
        if char_end > self.char_len() {
            return Err(Error::Alignment(format!(
                "range {char_start}..{char_end} exceeds text length {}",
                self.char_len()
            )));
        }
        let first = self.offsets.iter().position(|&(_, e)| e > char_start);
        let last = self.offsets.iter().rposition(|&(s, _)| s < char_end);
        match (first, last) {
            (Some(f), Some(l)) if f <= l => {
                let snapped = self.offsets[f].0 != char_start || self.offsets[l].1 != char_end;
                Ok((AnswerSpan::new(f, l), snapped))
            }
            _ => Err(Error::Alignment(format!(
                "range {char_start}..{char_end} covers no token"
            ))),
        }
    }
}
