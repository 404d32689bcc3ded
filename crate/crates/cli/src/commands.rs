use std::fs;
use std::path::{Path, PathBuf};

use keyqg::corpus::squad::read_title_list;
use keyqg::corpus::{SquadExample, SquadFile};
use keyqg::keyphrase::read_span_file;
use keyqg::pipeline::train::{extractor_vocabulary, qgen_vocabularies};
use keyqg::pipeline::{
    check_compatible, evaluate_keyphrase, evaluate_qgen, extractor_of, generate_for_spans, gradcheck_command,
    load_embeddings, load_splits, log_to_jsonl, run_pipeline, synthetic, train_extractor, train_qgen, Checkpoint,
    EpochLog, Extractor, Model, ModelKind, TrainConfig, TABLE_HEADER,
};
use keyqg::{Error, Result};
use serde::Serialize;

use crate::{Cli, Command, ExtractorKind, GradcheckKind, SyntheticCorpus};

pub enum Status {
    Success,
    ValidationFailed,
}

fn config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data = Some(d.clone());
    }
    if let Some(d) = &cli.dev_data {
        cfg.dev_data = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cfg: &TrainConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    Ok(cfg.output.join(name))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|x| serde_json::to_string(x).expect("serializable") + "\n").collect()
}

fn json<T: Serialize>(x: &T) -> String {
    serde_json::to_string_pretty(x).expect("serializable") + "\n"
}

fn read_examples(path: &Path) -> Result<Vec<SquadExample>> {
    Ok(SquadFile::read(path)?.to_examples().0)
}

fn print_log(log: &[EpochLog]) {
    for e in log {
        let dev = e.dev_score.map_or("-".to_string(), |s| format!("{s:.4}"));
        eprintln!("epoch {:>3}  loss {:.6}  dev {dev}{}", e.epoch, e.train_loss, if e.best { "  *" } else { "" });
    }
}

pub fn run(cli: &Cli) -> Result<Status> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::PrepareData { synthetic } => prepare_data(cfg, *synthetic),
        Command::TrainExtractor { kind } => {
            let kind = match kind {
                ExtractorKind::Nes => ModelKind::Nes,
                ExtractorKind::Ptrnet => ModelKind::Ptrnet,
            };
            let splits = load_splits(&cfg)?;
            let emb = load_embeddings(&cfg)?;
            let out = train_extractor(kind, &cfg, &splits.train, &splits.dev, emb.as_ref())?;
            print_log(&out.log);
            eprintln!("kept epoch {}", out.best_epoch);
            out.checkpoint.save(&out_path(&cfg, &format!("{kind}.ckpt"))?)?;
            write(&out_path(&cfg, &format!("{kind}.log.jsonl"))?, &log_to_jsonl(&out.log))?;
            if let Some(r) = &out.dev_report {
                write(&out_path(&cfg, &format!("{kind}.dev_predictions.jsonl"))?, &jsonl(&r.predictions))?;
                println!("{TABLE_HEADER}\n{}", r.table_row());
            }
            Ok(Status::Success)
        }
        Command::TrainQgen => {
            let splits = load_splits(&cfg)?;
            let emb = load_embeddings(&cfg)?;
            let out = train_qgen(&cfg, &splits.train, &splits.dev, emb.as_ref())?;
            print_log(&out.log);
            eprintln!("kept epoch {}", out.best_epoch);
            out.checkpoint.save(&out_path(&cfg, "qgen.ckpt")?)?;
            write(&out_path(&cfg, "qgen.log.jsonl")?, &log_to_jsonl(&out.log))?;
            if let Some(r) = &out.dev_report {
                write(&out_path(&cfg, "qgen.dev_generated.jsonl")?, &jsonl(&r.generated))?;
                println!("dev BLEU-4 {:.4}", r.bleu.score);
            }
            Ok(Status::Success)
        }
        Command::Extract { checkpoint, input } => {
            let examples = read_examples(input)?;
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let ex = match &ck {
                Some(c) => extractor_of(c)?,
                None => Extractor::Ent,
            };
            let mut records = Vec::new();
            for e in &examples {
                let set = ex.extract(&e.document)?;
                records.push(keyqg::keyphrase::KeyPhraseRecord {
                    doc_id: e.doc_id.clone(),
                    spans: set.spans().to_vec(),
                    texts: set.texts(&e.document),
                });
            }
            write(&out_path(&cfg, "keyphrases.jsonl")?, &jsonl(&records))?;
            Ok(Status::Success)
        }
        Command::Generate { checkpoint, input, spans } => {
            let ck = Checkpoint::load(checkpoint)?;
            let Model::Qgen(m) = &ck.model else {
                return Err(Error::Compatibility(format!("{} is not a qgen checkpoint", checkpoint.display())));
            };
            let examples = read_examples(input)?;
            let imported = spans.as_deref().map(read_span_file).transpose()?;
            let mut records = Vec::new();
            for e in &examples {
                let spans = match &imported {
                    Some(map) => map.get(&e.doc_id).cloned().unwrap_or_default(),
                    None => e.qas.iter().map(|q| q.span).collect(),
                };
                records.extend(generate_for_spans(m, &e.doc_id, &e.document, &spans)?);
            }
            write(&out_path(&cfg, "questions.jsonl")?, &jsonl(&records))?;
            Ok(Status::Success)
        }
        Command::Pipeline { extractor, qgen, input } => {
            let ext_ck = Checkpoint::load(extractor)?;
            let qg_ck = Checkpoint::load(qgen)?;
            check_compatible(&ext_ck, &qg_ck)?;
            let Model::Qgen(m) = &qg_ck.model else { unreachable!("checked compatible") };
            let docs: Vec<_> = read_examples(input)?.into_iter().map(|e| (e.doc_id, e.document)).collect();
            let out = run_pipeline(&extractor_of(&ext_ck)?, m, &docs)?;
            for id in &out.empty_documents {
                eprintln!("no key phrases extracted from `{id}`");
            }
            eprintln!("{} documents, {} question/answer pairs", docs.len(), out.records.len());
            write(&out_path(&cfg, "qa_pairs.jsonl")?, &out.to_jsonl())?;
            Ok(Status::Success)
        }
        Command::EvaluateKeyphrase { models, input } => {
            let examples = read_examples(input)?;
            let mut reports = Vec::new();
            for spec in models {
                let report = if spec.eq_ignore_ascii_case("ent") {
                    evaluate_keyphrase(&Extractor::Ent, &examples)?
                } else {
                    let ck = Checkpoint::load(Path::new(spec))?;
                    evaluate_keyphrase(&extractor_of(&ck)?, &examples)?
                };
                let name = report.model.to_lowercase();
                write(&out_path(&cfg, &format!("{name}.predictions.jsonl"))?, &jsonl(&report.predictions))?;
                reports.push(report);
            }
            println!("{TABLE_HEADER}");
            for r in &reports {
                println!("{}", r.table_row());
            }
            let summary: Vec<_> = reports.iter().map(|r| (&r.model, &r.scores)).collect();
            write(&out_path(&cfg, "keyphrase_report.json")?, &json(&summary))?;
            Ok(Status::Success)
        }
        Command::EvaluateQgen { checkpoint, input } => {
            let ck = Checkpoint::load(checkpoint)?;
            let Model::Qgen(m) = &ck.model else {
                return Err(Error::Compatibility(format!("{} is not a qgen checkpoint", checkpoint.display())));
            };
            let r = evaluate_qgen(m, &read_examples(input)?)?;
            println!(
                "BLEU-4 {:.4}  (p1..p4 {:.3} {:.3} {:.3} {:.3}, BP {:.3})  exact {:.3} over {} questions",
                r.bleu.score,
                r.bleu.precisions[0],
                r.bleu.precisions[1],
                r.bleu.precisions[2],
                r.bleu.precisions[3],
                r.bleu.brevity_penalty,
                r.exact_match,
                r.questions
            );
            write(&out_path(&cfg, "qgen_report.json")?, &json(&r))?;
            Ok(Status::Success)
        }
        Command::Gradcheck { kind } => {
            let kind = match kind {
                GradcheckKind::Nes => ModelKind::Nes,
                GradcheckKind::Ptrnet => ModelKind::Ptrnet,
                GradcheckKind::Qgen => ModelKind::Qgen,
            };
            let report = gradcheck_command(kind, cfg.seed)?;
            let failures = report.failures().count();
            println!(
                "{kind}: {} coordinates checked, max relative error {:.3e}, {failures} failures",
                report.params.iter().map(|p| p.coords_checked).sum::<usize>(),
                report.max_rel_err()
            );
            Ok(if report.passed() { Status::Success } else { Status::ValidationFailed })
        }
    }
}

fn prepare_data(mut cfg: TrainConfig, synthetic: Option<SyntheticCorpus>) -> Result<Status> {
    if let Some(kind) = synthetic {
        let (name, file) = match kind {
            SyntheticCorpus::Overfit => ("overfit.json", synthetic::overfit_corpus(cfg.seed)),
            SyntheticCorpus::Trend => ("trend.json", synthetic::trend_corpus(cfg.seed, 30, 11)),
        };
        let path = out_path(&cfg, name)?;
        file.write(&path)?;
        eprintln!("wrote {}", path.display());
        cfg.data = Some(path);
    }
    let data = cfg.data.clone().ok_or_else(|| Error::Config("`data` is not set".into()))?;
    let file = SquadFile::read(&data)?;
    let (train_file, dev_file) = match (&cfg.dev_data, &cfg.dev_titles) {
        (Some(d), _) => (file, Some(SquadFile::read(d)?)),
        (None, Some(t)) => {
            let (rest, sel) = file.split_by_titles(&read_title_list(t)?);
            (rest, Some(sel))
        }
        (None, None) => (file, None),
    };
    let train_path = out_path(&cfg, "train.json")?;
    train_file.write(&train_path)?;
    eprintln!("wrote {}", train_path.display());
    if let Some(dev) = &dev_file {
        let p = out_path(&cfg, "dev.json")?;
        dev.write(&p)?;
        eprintln!("wrote {}", p.display());
    }
    let (train, report) = train_file.to_examples();
    write(&out_path(&cfg, "alignment.jsonl")?, &report.to_jsonl())?;
    let words = extractor_vocabulary(&train, cfg.input_vocab_size);
    words.write(&out_path(&cfg, "extractor_vocab.txt")?)?;
    let qv = qgen_vocabularies(&train, &cfg);
    qv.input.write(&out_path(&cfg, "qgen_input_vocab.txt")?)?;
    qv.decoder.write(&out_path(&cfg, "qgen_decoder_vocab.txt")?)?;
    #[derive(Serialize)]
    struct Summary {
        paragraphs: usize,
        questions: usize,
        aligned: usize,
        snapped: usize,
        dropped: usize,
        without_answers: usize,
        dev_paragraphs: usize,
        extractor_vocab: usize,
        qgen_input_vocab: usize,
        qgen_decoder_vocab: usize,
    }
    let summary = Summary {
        paragraphs: report.paragraphs,
        questions: report.questions,
        aligned: report.aligned,
        snapped: report.snapped,
        dropped: report.dropped,
        without_answers: report.without_answers,
        dev_paragraphs: dev_file.map_or(0, |d| d.data.iter().map(|a| a.paragraphs.len()).sum()),
        extractor_vocab: words.len(),
        qgen_input_vocab: qv.input.len(),
        qgen_decoder_vocab: qv.decoder.len(),
    };
    let text = json(&summary);
    print!("{text}");
    write(&out_path(&cfg, "summary.json")?, &text)?;
    Ok(Status::Success)
}
