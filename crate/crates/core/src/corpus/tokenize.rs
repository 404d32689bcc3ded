//! Lower-casing word tokenizer with character offsets.
//!
//! Rules, applied in order:
//!
//! 1. Text is split into chunks on Unicode whitespace.
//! 2. A word character is any alphanumeric character or combining mark.
//!    Runs of word characters form tokens.
//! 3. Inside a run, a punctuation character is kept when it joins two word
//!    characters and is one of: a hyphen (`sorkin-created`), an apostrophe
//!    (`don't`), or a `.` or `,` between two digits (`1,000`, `2.5`).
//! 4. Abbreviations made of two or more letter-period pairs (`u.s.`,
//!    `e.g.`) are one token, trailing period included.
//! 5. Every other punctuation or symbol character is a token of its own.
//! 6. Tokens are lower-cased; offsets always index the raw text.
//!
//! Offsets count Unicode scalar values (not bytes), matching the character
//! offsets used by SQuAD annotations.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Start character offset (inclusive).
    pub start: usize,
    /// End character offset (exclusive).
    pub end: usize,
}

fn is_combining(c: char) -> bool {
    matches!(c as u32,
        0x0300..=0x036F | 0x1AB0..=0x1AFF | 0x1DC0..=0x1DFF | 0x20D0..=0x20FF | 0xFE20..=0xFE2F)
}

pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_combining(c)
}

fn is_joiner(c: char, prev: char, next: char) -> bool {
    match c {
        '-' | '\'' | '\u{2019}' => is_word_char(prev) && is_word_char(next),
        '.' | ',' => prev.is_numeric() && next.is_numeric(),
        _ => false,
    }
}

/// Length in chars of a `(letter '.'){2,}` abbreviation starting at `i`,
/// provided it is not immediately followed by another word character.
fn abbreviation_len(chars: &[char], i: usize) -> usize {
    let mut j = i;
    let mut pairs = 0;
    while j + 1 < chars.len() && chars[j].is_alphabetic() && chars[j + 1] == '.' {
        j += 2;
        pairs += 1;
    }
    if pairs >= 2 && !(j < chars.len() && is_word_char(chars[j])) {
        j - i
    } else {
        0
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let chunk_end = (i..chars.len())
            .find(|&j| chars[j].is_whitespace())
            .unwrap_or(chars.len());
        tokenize_chunk(&chars, i, chunk_end, &mut out);
        i = chunk_end;
    }
    out
}

fn tokenize_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let emit = |out: &mut Vec<Token>, s: usize, e: usize| {
        let text: String = chars[s..e].iter().collect::<String>().to_lowercase();
        out.push(Token { text, start: s, end: e });
    };
    let chunk = &chars[..end];
    let mut i = start;
    while i < end {
        let abbr = abbreviation_len(chunk, i);
        if abbr > 0 {
            emit(out, i, i + abbr);
            i += abbr;
            continue;
        }
        if !is_word_char(chunk[i]) {
            emit(out, i, i + 1);
            i += 1;
            continue;
        }
        let s = i;
        i += 1;
        while i < end {
            if is_word_char(chunk[i]) {
                i += 1;
            } else if i + 1 < end && is_joiner(chunk[i], chunk[i - 1], chunk[i + 1]) {
                i += 2;
            } else {
                break;
            }
        }
        emit(out, s, i);
    }
}
