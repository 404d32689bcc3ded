//! Property tests over the tokenizer, alignment, metrics, extractors and
//! the question generator.

use autodiff::{Graph, Mode, RngStream};
use keyqg::corpus::{tokenize, AnswerSpan, Document, SquadFile, Vocabulary};
use keyqg::gradcheck::randomize_params;
use keyqg::keyphrase::ptrnet::ptrnet_target_sequence;
use keyqg::keyphrase::{overlaps_any, DocBatch, EncoderConfig, PtrNetConfig, PtrNetModel};
use keyqg::metrics::{multi_span_f1, token_f1};
use keyqg::pipeline::synthetic;
use keyqg::qgen::{QgenConfig, QgenModel, QgenVocabs};
use proptest::prelude::*;

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            "[a-zA-Z]{1,6}",
            "[0-9]{1,4}([.,][0-9]{1,3})?",
            Just("U.S.".to_string()),
            Just("don't".to_string()),
            Just("well-known".to_string()),
            Just("Zürich".to_string()),
            Just("e\u{301}".to_string()),
            "[.,;:!?()$%\"'-]{1,3}",
            "[ \t\n]{1,2}",
        ],
        0..20,
    )
    .prop_map(|parts| parts.concat())
}

fn phrase_set() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec("[a-d]", 1..4), 0..5)
}

proptest! {
    #[test]
    fn tokens_round_trip_through_offsets(text in text_strategy()) {
        let chars: Vec<char> = text.chars().collect();
        let tokens = tokenize(&text);
        let mut covered = vec![false; chars.len()];
        let mut prev_end = 0;
        for t in &tokens {
            prop_assert!(t.start < t.end && t.end <= chars.len());
            prop_assert!(t.start >= prev_end);
            let slice: String = chars[t.start..t.end].iter().collect();
            prop_assert_eq!(slice.to_lowercase(), t.text.clone());
            prop_assert!(!slice.chars().any(char::is_whitespace));
            covered[t.start..t.end].iter_mut().for_each(|c| *c = true);
            prev_end = t.end;
        }
        for (c, seen) in chars.iter().zip(&covered) {
            prop_assert!(*seen || c.is_whitespace());
        }
    }

    #[test]
    fn alignment_is_pure_and_in_bounds(seed in 0u64..1000) {
        let bytes = serde_json::to_vec(&synthetic::trend_corpus(seed, 2, 3)).unwrap();
        let a = SquadFile::parse(&bytes).unwrap().to_examples();
        let b = SquadFile::parse(&bytes).unwrap().to_examples();
        prop_assert_eq!(&a.0, &b.0);
        prop_assert_eq!(a.1.to_jsonl(), b.1.to_jsonl());
        for e in &a.0 {
            for q in &e.qas {
                prop_assert!(q.span.start <= q.span.end && q.span.end < e.document.len());
            }
        }
    }

    #[test]
    fn multi_span_f1_is_permutation_invariant(pred in phrase_set(), gold in phrase_set(), seed in 0u64..1000) {
        let base = multi_span_f1(&pred, &gold);
        let mut rng = RngStream::new(seed);
        let (mut p2, mut g2) = (pred.clone(), gold.clone());
        rng.shuffle(&mut p2);
        rng.shuffle(&mut g2);
        let shuffled = multi_span_f1(&p2, &g2);
        prop_assert!((base.f1_ms - shuffled.f1_ms).abs() < 1e-12);
        prop_assert!((base.mean_precision - shuffled.mean_precision).abs() < 1e-12);
        prop_assert!((base.mean_recall - shuffled.mean_recall).abs() < 1e-12);
    }

    #[test]
    fn swapping_sets_swaps_precision_and_recall(pred in phrase_set(), gold in phrase_set()) {
        let a = multi_span_f1(&pred, &gold);
        let b = multi_span_f1(&gold, &pred);
        prop_assert_eq!(a.mean_precision, b.mean_recall);
        prop_assert_eq!(a.mean_recall, b.mean_precision);
        prop_assert!((a.f1_ms - b.f1_ms).abs() < 1e-15);
    }

    #[test]
    fn multi_span_f1_is_bounded_and_one_only_on_perfect_matches(pred in phrase_set(), gold in phrase_set()) {
        let m = multi_span_f1(&pred, &gold);
        prop_assert!((0.0..=1.0).contains(&m.f1_ms));
        for row in &m.scores {
            prop_assert!(row.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        let perfect = |xs: &[Vec<String>], ys: &[Vec<String>]| {
            xs.iter().all(|x| ys.iter().any(|y| token_f1(x, y).f1 == 1.0))
        };
        let both = !pred.is_empty() && !gold.is_empty() && perfect(&pred, &gold) && perfect(&gold, &pred);
        prop_assert_eq!(m.f1_ms == 1.0, both);
    }

    #[test]
    fn singleton_sets_reduce_to_token_f1(p in prop::collection::vec("[a-d]", 1..5), g in prop::collection::vec("[a-d]", 1..5)) {
        let m = multi_span_f1(std::slice::from_ref(&p), std::slice::from_ref(&g));
        prop_assert!((m.f1_ms - token_f1(&p, &g).f1).abs() < 1e-12);
    }

    #[test]
    fn target_sequence_ignores_answer_order(spans in prop::collection::vec((0usize..10, 0usize..4), 0..6), seed in 0u64..100) {
        let spans: Vec<AnswerSpan> = spans.into_iter().map(|(s, l)| AnswerSpan::new(s, s + l)).collect();
        let mut shuffled = spans.clone();
        RngStream::new(seed).shuffle(&mut shuffled);
        prop_assert_eq!(ptrnet_target_sequence(&spans, 14), ptrnet_target_sequence(&shuffled, 14));
    }

    #[test]
    fn entity_labels_match_interval_intersection(a in (0usize..12, 0usize..4), b in (0usize..12, 0usize..4)) {
        let x = AnswerSpan::new(a.0, a.0 + a.1);
        let y = AnswerSpan::new(b.0, b.0 + b.1);
        let oracle = (x.start..=x.end).any(|t| (y.start..=y.end).contains(&t));
        prop_assert_eq!(overlaps_any(x, &[y]), oracle);
        prop_assert_eq!(overlaps_any(y, &[x]), oracle);
    }
}

fn toy_ptrnet(seed: u64) -> (PtrNetModel, Vocabulary) {
    let docs = ["the cat sat on the mat", "paris hosted the 1900 games in a red house ."];
    let vocab = Vocabulary::build(docs.iter().map(|d| Document::new(*d).tokens().to_vec()), 100);
    let cfg = PtrNetConfig {
        encoder: EncoderConfig { word_dim: 4, hidden: 3, dropout: 0.5 },
        decoder_hidden: 5,
        max_phrases: 6,
    };
    (PtrNetModel::new(cfg, vocab.clone(), None, seed), vocab)
}

#[test]
fn padding_never_reaches_real_annotation_rows() {
    let (mut m, vocab) = toy_ptrnet(1);
    let short = Document::new("the cat sat");
    let long = Document::new("paris hosted the 1900 games in a red house .");
    for seed in 0..20 {
        randomize_params(&mut m.params, 1.5, seed);
        let alone = {
            let mut g = Graph::new(&m.params);
            let enc = m.encoder.encode(&mut g, &DocBatch::new(&[&short], &vocab), Mode::Eval, &mut RngStream::new(0)).unwrap();
            g.value(enc.enc.annotations).clone()
        };
        let mut g = Graph::new(&m.params);
        let batch = DocBatch::new(&[&short, &long], &vocab);
        let enc = m.encoder.encode(&mut g, &batch, Mode::Eval, &mut RngStream::new(0)).unwrap();
        let both = g.value(enc.enc.annotations);
        for t in 0..short.len() {
            for (x, y) in alone.row(t).iter().zip(both.row(t * 2)) {
                assert!((x - y).abs() < 1e-12, "seed {seed} step {t}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn eval_mode_encoding_is_deterministic() {
    let (m, vocab) = toy_ptrnet(2);
    let doc = Document::new("the cat sat on the mat");
    let run = |rng_seed| {
        let mut g = Graph::new(&m.params);
        let enc = m.encoder.encode(&mut g, &DocBatch::new(&[&doc], &vocab), Mode::Eval, &mut RngStream::new(rng_seed)).unwrap();
        g.value(enc.enc.annotations).clone()
    };
    assert_eq!(run(0), run(99));
}

#[test]
fn pointer_decoding_stays_within_step_bound() {
    let (mut m, _) = toy_ptrnet(3);
    let doc = Document::new("paris hosted the 1900 games in a red house .");
    for seed in 0..200 {
        randomize_params(&mut m.params, 3.0, seed);
        let d = m.decode(&doc).unwrap();
        assert!(d.pointed.len() <= 2 * m.config.max_phrases + 2);
    }
}

#[test]
fn question_decoding_is_deterministic_and_bounded() {
    let doc = Document::new("paris hosted the 1900 summer olympics .");
    let q = ["who", "hosted", "the", "games", "?"].map(String::from);
    let vocabs = QgenVocabs::build(&[&doc], &[&q], 100, 3);
    let cfg = QgenConfig {
        word_dim: 4,
        char_embedding_dim: 3,
        char_hidden: 2,
        encoder_hidden: 6,
        aggregation_hidden: 3,
        decoder_hidden: 5,
        attention_hidden: 4,
        generator_hidden: 5,
        dropout: 0.3,
        max_decode_length: 10,
    };
    let mut m = QgenModel::new(cfg, vocabs, None, 4);
    for seed in 0..50 {
        randomize_params(&mut m.params, 2.0, seed);
        let a = m.greedy_decode(&doc, AnswerSpan::new(0, 0), 7).unwrap();
        let b = m.greedy_decode(&doc, AnswerSpan::new(0, 0), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 7);
    }
}
