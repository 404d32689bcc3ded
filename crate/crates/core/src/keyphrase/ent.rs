//! Rule-based entity tagger used as the all-entities baseline.

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerSpan, Document};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityKind {
    Date,
    Number,
    CapitalizedSequence,
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub span: AnswerSpan,
    pub kind: EntityKind,
}

const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
    "november", "december",
];

const NUMBER_WORDS: [&str; 33] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
    "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety", "hundred",
    "thousand", "million", "billion", "trillion",
];

const STOPWORDS: [&str; 40] = [
    "a", "an", "the", "in", "on", "at", "of", "for", "to", "by", "with", "from", "and", "but", "or",
    "as", "it", "its", "this", "that", "these", "those", "he", "she", "they", "we", "i", "his",
    "her", "their", "when", "where", "what", "who", "which", "how", "there", "after", "during", "if",
];

fn is_numeral(t: &str) -> bool {
    t.chars().any(|c| c.is_ascii_digit()) && t.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

fn is_number(t: &str) -> bool {
    is_numeral(t) || NUMBER_WORDS.contains(&t)
}

fn is_day(t: &str) -> bool {
    t.len() <= 2 && t.parse::<u32>().is_ok_and(|d| (1..=31).contains(&d))
}

fn is_year(t: &str) -> bool {
    t.len() == 4 && t.chars().all(|c| c.is_ascii_digit())
}

/// Month names with an adjacent day and/or year: `september 1967`,
/// `5 may 1990`, `june 4 , 1980`.
fn date_spans(toks: &[String]) -> Vec<AnswerSpan> {
    let mut out = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        if !MONTHS.contains(&t.as_str()) {
            continue;
        }
        let mut start = i;
        let mut end = i;
        if i > 0 && is_day(&toks[i - 1]) {
            start = i - 1;
        }
        let at = |k: usize| toks.get(k).map(String::as_str);
        if at(end + 1).is_some_and(is_day) {
            end += 1;
            if at(end + 1) == Some(",") && at(end + 2).is_some_and(is_year) {
                end += 2;
            } else if at(end + 1).is_some_and(is_year) {
                end += 1;
            }
        } else if at(end + 1).is_some_and(is_year) {
            end += 1;
        }
        if start != i || end != i {
            out.push(AnswerSpan::new(start, end));
        }
    }
    out
}

/// Maximal runs of number tokens.
fn number_spans(toks: &[String]) -> Vec<AnswerSpan> {
    runs(toks.len(), |i| is_number(&toks[i]))
}

fn runs(n: usize, pred: impl Fn(usize) -> bool) -> Vec<AnswerSpan> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if pred(i) {
            let s = i;
            while i + 1 < n && pred(i + 1) {
                i += 1;
            }
            out.push(AnswerSpan::new(s, i));
        }
        i += 1;
    }
    out
}

/// Maximal runs of tokens whose raw text starts with an uppercase letter,
/// with leading stopwords removed.
fn capitalized_spans(doc: &Document) -> Vec<AnswerSpan> {
    let caps = |i: usize| doc.raw_token(i).chars().next().is_some_and(char::is_uppercase);
    runs(doc.len(), caps)
        .into_iter()
        .filter_map(|mut s| {
            while s.start <= s.end && STOPWORDS.contains(&doc.tokens()[s.start].as_str()) {
                s.start += 1;
            }
            (s.start <= s.end).then_some(s)
        })
        .collect()
}

/// Union of the date, number and capitalized-run rules plus `imported`.
/// A rule hit lying strictly inside another rule hit is dropped, so
/// `September 1967` yields one date rather than a date, a month and a year.
pub fn ent_baseline_tag(doc: &Document, imported: &[AnswerSpan]) -> Vec<EntitySpan> {
    let toks = doc.tokens();
    let mut hits: Vec<EntitySpan> = Vec::new();
    let mut push = |spans: Vec<AnswerSpan>, kind| {
        hits.extend(spans.into_iter().map(|span| EntitySpan { span, kind }));
    };
    push(date_spans(toks), EntityKind::Date);
    push(capitalized_spans(doc), EntityKind::CapitalizedSequence);
    push(number_spans(toks), EntityKind::Number);

    let inside = |a: AnswerSpan, b: AnswerSpan| a != b && b.start <= a.start && a.end <= b.end;
    let mut out: Vec<EntitySpan> = Vec::new();
    for h in &hits {
        if hits.iter().any(|o| inside(h.span, o.span)) {
            continue;
        }
        if !out.iter().any(|o| o.span == h.span) {
            out.push(*h);
        }
    }
    for &span in imported {
        if span.within(doc.len()) && !out.iter().any(|o| o.span == span) {
            out.push(EntitySpan { span, kind: EntityKind::Imported });
        }
    }
    out.sort_by_key(|e| e.span);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans_text(doc: &Document, ents: &[EntitySpan]) -> Vec<String> {
        ents.iter().map(|e| doc.span_text(e.span)).collect()
    }

    #[test]
    fn date_and_person() {
        let d = Document::new("In September 1967, William Smith left the city.");
        let e = ent_baseline_tag(&d, &[]);
        assert_eq!(spans_text(&d, &e), ["september 1967", "william smith"]);
        assert_eq!(e[0].kind, EntityKind::Date);
        assert_eq!(e[1].kind, EntityKind::CapitalizedSequence);
    }

    #[test]
    fn digits_and_number_words() {
        let d = Document::new("there were 3 cats and five dogs");
        let e = ent_baseline_tag(&d, &[]);
        assert_eq!(spans_text(&d, &e), ["3", "five"]);
        assert!(e.iter().all(|x| x.kind == EntityKind::Number));
    }

    #[test]
    fn lowercase_text_yields_only_imports() {
        let d = Document::new("the cat sat on the mat");
        assert!(ent_baseline_tag(&d, &[]).is_empty());
        let e = ent_baseline_tag(&d, &[AnswerSpan::new(4, 5), AnswerSpan::new(9, 9)]);
        assert_eq!(e, [EntitySpan { span: AnswerSpan::new(4, 5), kind: EntityKind::Imported }]);
    }

    #[test]
    fn day_month_year_variants() {
        let d = Document::new("on 5 May 1990 and June 4, 1980 and $19 billion");
        let e = ent_baseline_tag(&d, &[]);
        assert_eq!(spans_text(&d, &e), ["5 may 1990", "june 4 , 1980", "19 billion"]);
    }
}
