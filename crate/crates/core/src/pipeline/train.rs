//! Minibatch Adam training with per-epoch dev evaluation and early stopping.

use std::collections::HashMap;

use autodiff::{AdamConfig, AdamState, Graph, Mode, ParamStore, Parameterized, RngStream, Var};
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Model, ModelKind};
use super::config::TrainConfig;
use super::eval::{evaluate_keyphrase, evaluate_qgen, qa_triples, Extractor, KeyphraseReport, QgenReport};
use crate::corpus::vocab::hash_lines;
use crate::corpus::{batch_iterate, AnswerSpan, Document, SquadExample, Vocabulary};
use crate::error::{Error, Result};
use crate::keyphrase::{ent_baseline_tag, NesModel, PtrNetModel};
use crate::qgen::{QgenExample, QgenModel, QgenVocabs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch, in training mode.
    pub train_loss: f64,
    /// Dev F1_MS for extractors, dev BLEU-4 for the question generator.
    pub dev_score: Option<f64>,
    pub best: bool,
}

pub fn log_to_jsonl(log: &[EpochLog]) -> String {
    log.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
}

#[derive(Debug, Clone)]
pub struct ExtractorOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Dev evaluation of the retained parameters.
    pub dev_report: Option<KeyphraseReport>,
}

#[derive(Debug, Clone)]
pub struct QgenOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub dev_report: Option<QgenReport>,
}

/// Hash over every document and question of a corpus, in order.
pub fn corpus_hash(examples: &[SquadExample]) -> String {
    let mut lines = Vec::new();
    for e in examples {
        lines.push(format!("{}\t{}", e.doc_id, e.document.tokens().join(" ")));
        for q in &e.qas {
            lines.push(format!("{}\t{}\t{}", q.span.start, q.span.end, q.question.join(" ")));
        }
    }
    hash_lines(&lines)
}

struct Fit {
    log: Vec<EpochLog>,
    best_epoch: usize,
    adam: AdamState,
}

/// Shared epoch loop. `loss` returns `None` for a batch with nothing to
/// learn from; `score` returns the dev score (higher is better) or `None`
/// when there is no dev data, in which case the final parameters are kept.
fn fit<M, L, S>(model: &mut M, n: usize, cfg: &TrainConfig, loss: L, mut score: S) -> Result<Fit>
where
    M: Parameterized,
    L: for<'a> Fn(&'a M, &mut Graph<'a>, &[usize], &mut RngStream) -> Result<Option<Var>>,
    S: FnMut(&M) -> Result<Option<f64>>,
{
    let root = RngStream::new(cfg.seed);
    let mut order_rng = root.split(1);
    let mut dropout_rng = root.split(2);
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
    );
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, AdamState)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in batch_iterate(n, cfg.batch_size, &mut order_rng) {
            let step = {
                let m: &M = model;
                let mut g = Graph::new(m.params());
                match loss(m, &mut g, &idx, &mut dropout_rng)? {
                    Some(l) => {
                        let v = g.value(l).item()?;
                        Some((v, g.backward(l)?.into_param_grads()))
                    }
                    None => None,
                }
            };
            if let Some((v, grads)) = step {
                if !v.is_finite() {
                    return Err(Error::Config(format!("training loss became non-finite at epoch {epoch}")));
                }
                adam.step(model.params_mut(), &grads)?;
                total += v;
                batches += 1;
            }
        }
        let dev_score = score(model)?;
        let improved = match (dev_score, &best) {
            (Some(s), Some((b, ..))) => s > *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = Some((dev_score.unwrap_or(0.0), epoch, model.params().clone(), adam.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        log.push(EpochLog {
            epoch,
            train_loss: total / batches.max(1) as f64,
            dev_score,
            best: improved,
        });
        if dev_score.is_some() && stale >= cfg.patience {
            break;
        }
    }
    let best_epoch = match best {
        Some((_, e, ps, a)) => {
            *model.params_mut() = ps;
            adam = a;
            e
        }
        None => log.len(),
    };
    Ok(Fit { log, best_epoch, adam })
}

fn nonempty_docs(examples: &[SquadExample]) -> Vec<&SquadExample> {
    examples.iter().filter(|e| !e.document.is_empty()).collect()
}

pub fn extractor_vocabulary(train: &[SquadExample], size: usize) -> Vocabulary {
    Vocabulary::build(train.iter().map(|e| e.document.tokens()), size)
}

/// Trains a NES or PtrNet extractor on documents with their gold spans.
pub fn train_extractor(
    kind: ModelKind,
    cfg: &TrainConfig,
    train: &[SquadExample],
    dev: &[SquadExample],
    pretrained: Option<&HashMap<String, Vec<f64>>>,
) -> Result<ExtractorOutcome> {
    cfg.validate()?;
    let docs = nonempty_docs(train);
    if docs.is_empty() {
        return Err(Error::Config("training set has no documents".into()));
    }
    let vocab = extractor_vocabulary(train, cfg.input_vocab_size);
    let gold: Vec<Vec<AnswerSpan>> = docs.iter().map(|e| e.gold_spans()).collect();
    let has_dev = dev.iter().any(|e| !e.qas.is_empty());
    let (model, fit) = match kind {
        ModelKind::Nes => {
            let mut m = NesModel::new(cfg.nes_config(), vocab, pretrained, cfg.seed);
            let ents: Vec<Vec<AnswerSpan>> = docs
                .iter()
                .map(|e| ent_baseline_tag(&e.document, &[]).into_iter().map(|s| s.span).collect())
                .collect();
            let fit = fit(
                &mut m,
                docs.len(),
                cfg,
                |m, g, idx, rng| {
                    let d: Vec<&Document> = idx.iter().map(|&i| &docs[i].document).collect();
                    let en: Vec<Vec<AnswerSpan>> = idx.iter().map(|&i| ents[i].clone()).collect();
                    let go: Vec<Vec<AnswerSpan>> = idx.iter().map(|&i| gold[i].clone()).collect();
                    m.loss(g, &d, &en, &go, Mode::Train, rng)
                },
                |m| dev_f1(has_dev, Extractor::Nes(m), dev),
            )?;
            (Model::Nes(m), fit)
        }
        ModelKind::Ptrnet => {
            let mut m = PtrNetModel::new(cfg.ptrnet_config(), vocab, pretrained, cfg.seed);
            let fit = fit(
                &mut m,
                docs.len(),
                cfg,
                |m, g, idx, rng| {
                    let d: Vec<&Document> = idx.iter().map(|&i| &docs[i].document).collect();
                    let go: Vec<Vec<AnswerSpan>> = idx.iter().map(|&i| gold[i].clone()).collect();
                    m.loss(g, &d, &go, Mode::Train, rng).map(Some)
                },
                |m| dev_f1(has_dev, Extractor::PtrNet(m), dev),
            )?;
            (Model::PtrNet(m), fit)
        }
        ModelKind::Qgen => return Err(Error::Config("qgen is not an extractor; use train_qgen".into())),
    };
    let dev_report = if has_dev {
        let ex = match &model {
            Model::Nes(m) => Extractor::Nes(m),
            Model::PtrNet(m) => Extractor::PtrNet(m),
            Model::Qgen(_) => unreachable!("extractor kinds only"),
        };
        Some(evaluate_keyphrase(&ex, dev)?)
    } else {
        None
    };
    let mut checkpoint = Checkpoint::new(model, cfg.clone(), corpus_hash(train));
    checkpoint.optimizer = Some(fit.adam);
    Ok(ExtractorOutcome {
        checkpoint,
        log: fit.log,
        best_epoch: fit.best_epoch,
        dev_report,
    })
}

fn dev_f1(has_dev: bool, ex: Extractor, dev: &[SquadExample]) -> Result<Option<f64>> {
    if !has_dev {
        return Ok(None);
    }
    Ok(Some(evaluate_keyphrase(&ex, dev)?.scores.f1_ms))
}

pub fn qgen_vocabularies(train: &[SquadExample], cfg: &TrainConfig) -> QgenVocabs {
    let docs: Vec<&Document> = train.iter().map(|e| &e.document).collect();
    let questions: Vec<&[String]> = train.iter().flat_map(|e| e.qas.iter().map(|q| &q.question[..])).collect();
    QgenVocabs::build(&docs, &questions, cfg.input_vocab_size, cfg.decoder_vocab_size)
}

/// Teacher-forced training on (document, gold answer, gold question)
/// triples.
pub fn train_qgen(
    cfg: &TrainConfig,
    train: &[SquadExample],
    dev: &[SquadExample],
    pretrained: Option<&HashMap<String, Vec<f64>>>,
) -> Result<QgenOutcome> {
    cfg.validate()?;
    let triples = qa_triples(train);
    if triples.is_empty() {
        return Err(Error::Config("training set has no question/answer pairs".into()));
    }
    let mut m = QgenModel::new(cfg.qgen_config(), qgen_vocabularies(train, cfg), pretrained, cfg.seed);
    let has_dev = !qa_triples(dev).is_empty();
    let fit = fit(
        &mut m,
        triples.len(),
        cfg,
        |m, g, idx, rng| {
            let batch: Vec<QgenExample> = idx.iter().map(|&i| triples[i]).collect();
            Ok(Some(m.loss(g, &batch, Mode::Train, rng)?.0))
        },
        |m| {
            if !has_dev {
                return Ok(None);
            }
            Ok(Some(evaluate_qgen(m, dev)?.bleu.score))
        },
    )?;
    let dev_report = if has_dev { Some(evaluate_qgen(&m, dev)?) } else { None };
    let mut checkpoint = Checkpoint::new(Model::Qgen(m), cfg.clone(), corpus_hash(train));
    checkpoint.optimizer = Some(fit.adam);
    Ok(QgenOutcome {
        checkpoint,
        log: fit.log,
        best_epoch: fit.best_epoch,
        dev_report,
    })
}

/// Eval-mode mean loss per token over a corpus's triples.
pub fn qgen_mean_loss(m: &QgenModel, examples: &[SquadExample]) -> Result<f64> {
    let triples = qa_triples(examples);
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in &triples {
        let mut g = Graph::new(&m.params);
        let (l, stats) = m.loss(&mut g, &[*ex], Mode::Eval, &mut RngStream::new(0))?;
        total += g.value(l).item()? * stats.tokens as f64;
        tokens += stats.tokens;
    }
    Ok(total / tokens.max(1) as f64)
}
