//! SQuAD v1.1 JSON ingestion.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::document::{AnswerSpan, Document};
use super::tokenize::tokenize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SquadFile {
    #[serde(default)]
    pub version: Option<String>,
    pub data: Vec<SquadArticle>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SquadArticle {
    pub title: String,
    pub paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SquadParagraph {
    pub context: String,
    pub qas: Vec<SquadQa>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SquadQa {
    #[serde(default)]
    pub id: String,
    pub question: String,
    pub answers: Vec<SquadAnswer>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SquadAnswer {
    pub text: String,
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaPair {
    pub id: String,
    pub question: Vec<String>,
    pub answer_text: String,
    pub span: AnswerSpan,
}

/// One paragraph with its aligned question/answer pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SquadExample {
    pub doc_id: String,
    pub title: String,
    pub document: Document,
    pub qas: Vec<QaPair>,
}

impl SquadExample {
    /// Distinct gold answer spans, sorted.
    pub fn gold_spans(&self) -> Vec<AnswerSpan> {
        let mut spans: Vec<AnswerSpan> = self.qas.iter().map(|q| q.span).collect();
        spans.sort();
        spans.dedup();
        spans
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentStatus {
    Snapped,
    Dropped,
}

/// One JSON-lines record per answer that was widened or discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub doc_id: String,
    pub question_id: String,
    pub answer_start: usize,
    pub answer_text: String,
    pub status: AlignmentStatus,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub paragraphs: usize,
    pub questions: usize,
    pub aligned: usize,
    pub snapped: usize,
    pub dropped: usize,
    pub without_answers: usize,
    pub records: Vec<AlignmentRecord>,
}

impl AlignmentReport {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("serializable"));
            s.push('\n');
        }
        s
    }
}

impl SquadFile {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).expect("serializable");
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Splits articles into `(rest, selected)` by title.
    pub fn split_by_titles(&self, titles: &HashSet<String>) -> (SquadFile, SquadFile) {
        let (sel, rest): (Vec<_>, Vec<_>) =
            self.data.iter().cloned().partition(|a| titles.contains(&a.title));
        (
            SquadFile {
                version: self.version.clone(),
                data: rest,
            },
            SquadFile {
                version: self.version.clone(),
                data: sel,
            },
        )
    }

    /// Tokenizes every paragraph and aligns each answer to token indices.
    /// Only the first answer of each question is used.
    pub fn to_examples(&self) -> (Vec<SquadExample>, AlignmentReport) {
        let mut report = AlignmentReport::default();
        let mut out = Vec::new();
        for article in &self.data {
            for (pi, para) in article.paragraphs.iter().enumerate() {
                report.paragraphs += 1;
                let doc_id = format!("{}/{pi}", article.title);
                let document = Document::new(para.context.clone());
                let mut qas = Vec::new();
                for qa in &para.qas {
                    report.questions += 1;
                    let Some(ans) = qa.answers.first() else {
                        report.without_answers += 1;
                        continue;
                    };
                    let record = |status, detail: String| AlignmentRecord {
                        doc_id: doc_id.clone(),
                        question_id: qa.id.clone(),
                        answer_start: ans.answer_start,
                        answer_text: ans.text.clone(),
                        status,
                        detail,
                    };
                    match document.align_char_span(ans.answer_start, ans.text.chars().count()) {
                        Ok((span, snapped)) => {
                            if snapped {
                                report.snapped += 1;
                                report.records.push(record(
                                    AlignmentStatus::Snapped,
                                    format!("widened to tokens {}..={}", span.start, span.end),
                                ));
                            } else {
                                report.aligned += 1;
                            }
                            qas.push(QaPair {
                                id: qa.id.clone(),
                                question: tokenize(&qa.question).into_iter().map(|t| t.text).collect(),
                                answer_text: ans.text.clone(),
                                span,
                            });
                        }
                        Err(e) => {
                            report.dropped += 1;
                            report.records.push(record(AlignmentStatus::Dropped, e.to_string()));
                        }
                    }
                }
                out.push(SquadExample {
                    doc_id,
                    title: article.title.clone(),
                    document,
                    qas,
                });
            }
        }
        (out, report)
    }
}

pub fn load_squad(path: &Path) -> Result<(Vec<SquadExample>, AlignmentReport)> {
    Ok(SquadFile::read(path)?.to_examples())
}

/// Reads one article title per line; blank lines and `#` comments skipped.
pub fn read_title_list(path: &Path) -> Result<HashSet<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}
