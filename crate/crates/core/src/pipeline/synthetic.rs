//! Small generated corpora in SQuAD form, for smoke tests, overfitting
//! checks and the extraction trend comparison.

use autodiff::RngStream;

use crate::corpus::squad::{SquadAnswer, SquadArticle, SquadFile, SquadParagraph, SquadQa};

const NAMES: [&str; 24] = [
    "Adler", "Baptiste", "Castillo", "Dubois", "Eriksen", "Fontaine", "Garcia", "Hoffmann", "Ibsen", "Jansen",
    "Kowalski", "Lindqvist", "Moreau", "Novak", "Okafor", "Petrov", "Quinn", "Rossi", "Sato", "Tanaka", "Ulrich",
    "Varga", "Weber", "Yilmaz",
];
const CITIES: [&str; 20] = [
    "Oslo", "Lima", "Quito", "Riga", "Turin", "Lyon", "Porto", "Graz", "Bergen", "Malmo", "Split", "Ghent",
    "Leeds", "Kyoto", "Perth", "Dakar", "Hanoi", "Cusco", "Basel", "Tartu",
];
const ORGS: [&str; 10] = [
    "museum", "library", "school", "choir", "bank", "theater", "hospital", "observatory", "orchestra", "bakery",
];
const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
    "November", "December",
];
const THINGS: [&str; 8] = ["bridge", "tower", "canal", "garden", "station", "harbor", "market", "chapel"];

/// Builds a paragraph from pieces; `Some(q)` marks a piece as the answer to
/// question `q`.
struct ParagraphBuilder {
    context: String,
    qas: Vec<SquadQa>,
    id_prefix: String,
}

impl ParagraphBuilder {
    fn new(id_prefix: String) -> Self {
        ParagraphBuilder {
            context: String::new(),
            qas: Vec::new(),
            id_prefix,
        }
    }

    fn push(&mut self, text: &str) {
        if !self.context.is_empty() && !text.starts_with([',', '.', '?']) {
            self.context.push(' ');
        }
        self.context.push_str(text);
    }

    fn answer(&mut self, text: &str, question: String) {
        if !self.context.is_empty() {
            self.context.push(' ');
        }
        let start = self.context.chars().count();
        self.context.push_str(text);
        let n = self.qas.len();
        self.qas.push(SquadQa {
            id: format!("{}-{n}", self.id_prefix),
            question,
            answers: vec![SquadAnswer {
                text: text.to_string(),
                answer_start: start,
            }],
        });
    }

    fn finish(self) -> SquadParagraph {
        SquadParagraph {
            context: self.context,
            qas: self.qas,
        }
    }
}

fn pick<'a>(rng: &mut RngStream, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

/// Twenty short paragraphs with two answers each.
pub fn overfit_corpus(seed: u64) -> SquadFile {
    let mut rng = RngStream::new(seed);
    let mut paragraphs = Vec::new();
    for i in 0..20 {
        let name = NAMES[i];
        let city = CITIES[i];
        let org = pick(&mut rng, &ORGS);
        let year = (1850 + rng.below(150)).to_string();
        let mut p = ParagraphBuilder::new(format!("overfit-{i}"));
        match i % 3 {
            0 => {
                p.answer(name, format!("who founded the {org} in {city} ?"));
                p.push(&format!("founded the {org} in {city} in"));
                p.answer(&year, format!("when did {name} found the {org} ?"));
                p.push(".");
            }
            1 => {
                p.push(&format!("in {year} , the {org} of"));
                p.answer(city, format!("where is the {org} that opened in {year} ?"));
                p.push("was opened by");
                p.answer(name, format!("who opened the {org} ?"));
                p.push(".");
            }
            _ => {
                p.push(&format!("the {org} was moved to"));
                p.answer(city, format!("where was the {org} moved ?"));
                p.push("in");
                p.answer(&year, format!("when was the {org} moved to {city} ?"));
                p.push(&format!("by {name} ."));
            }
        }
        paragraphs.push(p.finish());
    }
    SquadFile {
        version: Some("synthetic-overfit".into()),
        data: vec![SquadArticle {
            title: "Overfit".into(),
            paragraphs,
        }],
    }
}

/// Paragraphs dense in dates, numbers and names of which only some are
/// answers, so that tagging every entity over-generates. Each paragraph has
/// three sentences; `articles` articles of `per_article` paragraphs.
pub fn trend_corpus(seed: u64, articles: usize, per_article: usize) -> SquadFile {
    let mut rng = RngStream::new(seed);
    let mut data = Vec::new();
    for a in 0..articles {
        let mut paragraphs = Vec::new();
        for pi in 0..per_article {
            let mut p = ParagraphBuilder::new(format!("trend-{a}-{pi}"));
            let mut kinds = [0usize, 1, 2, 3];
            rng.shuffle(&mut kinds);
            for &k in &kinds[..3] {
                trend_sentence(&mut rng, &mut p, k);
            }
            paragraphs.push(p.finish());
        }
        data.push(SquadArticle {
            title: format!("Article {a}"),
            paragraphs,
        });
    }
    SquadFile {
        version: Some("synthetic-trend".into()),
        data,
    }
}

/// One sentence whose answer is drawn from several candidate slots with
/// unequal weights, mimicking annotators who pick different phrases from
/// similar sentences. Some candidates are not entities.
fn trend_sentence(rng: &mut RngStream, p: &mut ParagraphBuilder, kind: usize) {
    let name = pick(rng, &NAMES);
    let other = pick(rng, &NAMES);
    let city = pick(rng, &CITIES);
    let dest = pick(rng, &CITIES);
    let org = pick(rng, &ORGS);
    let thing = pick(rng, &THINGS);
    let month = pick(rng, &MONTHS);
    let year = (1700 + rng.below(300)).to_string();
    let count = (2 + rng.below(900)).to_string();
    let day = (1 + rng.below(28)).to_string();
    // (text, question, weight); a `None` question is plain text.
    let pieces: Vec<(String, Option<String>, u32)> = match kind {
        0 => vec![
            (format!("In {month}"), None, 0),
            (year.clone(), Some(format!("when was the {thing} in {city} built ?")), 2),
            (",".into(), None, 0),
            (name.into(), Some(format!("who built the {thing} in {city} ?")), 6),
            (format!("built the {thing} of {city} with"), None, 0),
            (count.clone(), Some(format!("how many workers built the {thing} ?")), 1),
            (format!("workers and {other} ."), None, 0),
        ],
        1 => vec![
            (format!("The {org} of {city} , which {other} visited in {year} , has"), None, 0),
            (count.clone(), Some(format!("how many members does the {org} have ?")), 6),
            ("members and".into(), None, 0),
            (format!("a {thing}"), Some(format!("what does the {org} of {city} own ?")), 2),
            (".".into(), None, 0),
        ],
        2 => vec![
            (name.into(), Some(format!("who moved from {city} to {dest} ?")), 2),
            (format!("moved from {city} to"), None, 0),
            (dest.into(), Some(format!("where did {name} move ?")), 6),
            ("after".into(), None, 0),
            (format!("{count} days"), Some(format!("how long did {name} stay ?")), 1),
            (format!("in {month} ."), None, 0),
        ],
        _ => vec![
            (format!("The {thing} , finished on {month} {day} by {other} , was sold in"), None, 0),
            (year.clone(), Some(format!("when was the {thing} sold ?")), 6),
            ("to".into(), None, 0),
            (format!("the {org}"), Some(format!("who bought the {thing} ?")), 2),
            (".".into(), None, 0),
        ],
    };
    let total: u32 = pieces.iter().map(|x| x.2).sum();
    let mut draw = rng.below(total as usize) as u32;
    let mut chosen = 0;
    for (i, x) in pieces.iter().enumerate() {
        if draw < x.2 {
            chosen = i;
            break;
        }
        draw -= x.2;
    }
    for (i, (text, question, _)) in pieces.into_iter().enumerate() {
        match question {
            Some(q) if i == chosen => p.answer(&text, q),
            _ => p.push(&text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_corpus_aligns_exactly() {
        let (ex, report) = overfit_corpus(1).to_examples();
        assert_eq!(ex.len(), 20);
        assert_eq!(report.aligned, 40);
        assert_eq!(report.snapped + report.dropped, 0);
        for e in &ex {
            assert!(e.document.len() <= 16);
            for q in &e.qas {
                assert_eq!(e.document.span_text(q.span), q.answer_text.to_lowercase());
            }
        }
    }

    #[test]
    fn trend_corpus_is_deterministic_and_aligned() {
        let f = trend_corpus(3, 4, 5);
        assert_eq!(f, trend_corpus(3, 4, 5));
        let (ex, report) = f.to_examples();
        assert_eq!(ex.len(), 20);
        assert_eq!(report.aligned, 60);
        assert_eq!(report.dropped, 0);
    }
}
