use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Word vocabulary with four reserved ids in front.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `size` most frequent tokens; ties go to the
    /// lexicographically smaller token.
    pub fn build<I, S>(streams: I, size: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let streams: Vec<S> = streams.into_iter().collect();
        for s in &streams {
            for t in s.as_ref() {
                if !RESERVED.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(size);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    /// A vocabulary over `tokens` in the given order, after the reserved ids.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !RESERVED.contains(&t.as_str()) && !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn content_hash(&self) -> String {
        hash_lines(self.entries())
    }

    /// One token per line; line `n` (from zero) holds id `n + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.entries() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(text.lines().map(str::to_string)))
    }
}

pub(crate) fn hash_lines<S: AsRef<str>>(items: &[S]) -> String {
    let mut h = Sha256::new();
    for t in items {
        h.update(t.as_ref().as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const CHAR_PAD: usize = 0;
pub const CHAR_UNK: usize = 1;

/// Character inventory of the training tokens, sorted by code point.
#[derive(Debug, Clone, PartialEq)]
pub struct CharVocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocabulary {
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<char> = tokens
            .into_iter()
            .flat_map(|t| t.as_ref().chars().collect::<Vec<_>>())
            .collect();
        Self::from_chars(set)
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
        CharVocabulary { chars, index }
    }

    /// Number of ids including PAD and UNK.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(CHAR_UNK)
    }

    pub fn ids(&self, token: &str) -> Vec<usize> {
        token.chars().map(|c| self.id(c)).collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn content_hash(&self) -> String {
        let s: Vec<String> = self.chars.iter().map(|c| c.to_string()).collect();
        hash_lines(&s)
    }
}
