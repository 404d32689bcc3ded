use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
word_dim = 8
keyphrase_hidden = 8
nes_mlp_hidden = [6, 4]
qgen_hidden = 8
char_embedding_dim = 4
char_hidden = 4
epochs = 2
batch_size = 8
learning_rate = 0.01
decoder_vocab_size = 50
max_decode_length = 12
";

fn keyqg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keyqg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(&keyqg(dir.path(), &["--config", "tiny.toml", "--out", "out", "prepare-data", "--synthetic", "overfit"]));
    dir
}

fn common<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", "tiny.toml", "--out", "out", "--data", "out/train.json"];
    v.extend_from_slice(rest);
    v
}

#[test]
fn prepare_data_writes_splits_vocabularies_and_summary() {
    let dir = setup();
    let out = dir.path().join("out");
    for f in ["overfit.json", "train.json", "alignment.jsonl", "extractor_vocab.txt", "qgen_decoder_vocab.txt", "summary.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["paragraphs"], 20);
    assert_eq!(summary["aligned"], 40);
}

#[test]
fn train_extract_generate_and_pipeline_end_to_end() {
    let dir = setup();
    let d = dir.path();
    ok(&keyqg(d, &common(&["--dev-data", "out/train.json", "train-extractor", "--kind", "ptrnet"])));
    ok(&keyqg(d, &common(&["train-qgen"])));
    for f in ["ptrnet.ckpt", "ptrnet.log.jsonl", "ptrnet.dev_predictions.jsonl", "qgen.ckpt", "qgen.log.jsonl"] {
        assert!(d.join("out").join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(d.join("out/ptrnet.log.jsonl")).unwrap().lines().count(), 2);

    ok(&keyqg(d, &common(&["pipeline", "--extractor", "out/ptrnet.ckpt", "--qgen", "out/qgen.ckpt", "--input", "out/train.json"])));
    let extracted = keyqg(d, &common(&["extract", "--checkpoint", "out/ptrnet.ckpt", "--input", "out/train.json"]));
    ok(&extracted);
    let phrases: usize = fs::read_to_string(d.join("out/keyphrases.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["spans"].as_array().unwrap().len())
        .sum();
    let qa = fs::read_to_string(d.join("out/qa_pairs.jsonl")).unwrap();
    assert_eq!(qa.lines().count(), phrases);
    for line in qa.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["answer_span"][0].as_u64().unwrap() <= v["answer_span"][1].as_u64().unwrap());
        assert!(v["answer_span"][1].as_u64().unwrap() < 16);
    }

    ok(&keyqg(d, &common(&["generate", "--checkpoint", "out/qgen.ckpt", "--input", "out/train.json"])));
    assert_eq!(fs::read_to_string(d.join("out/questions.jsonl")).unwrap().lines().count(), 40);

    let eval = keyqg(d, &common(&["evaluate-keyphrase", "--model", "ent", "--model", "out/ptrnet.ckpt", "--input", "out/train.json"]));
    ok(&eval);
    let table = String::from_utf8_lossy(&eval.stdout);
    assert!(table.contains("F1_MS") && table.contains("Prec.") && table.contains("Rec."));
    assert!(table.contains("ENT") && table.contains("PtrNet"));

    let q = keyqg(d, &common(&["evaluate-qgen", "--checkpoint", "out/qgen.ckpt", "--input", "out/train.json"]));
    ok(&q);
    assert!(String::from_utf8_lossy(&q.stdout).contains("BLEU-4"));
}

#[test]
fn nes_training_runs() {
    let dir = setup();
    ok(&keyqg(dir.path(), &common(&["train-extractor", "--kind", "nes"])));
    assert!(dir.path().join("out/nes.ckpt").exists());
}

#[test]
fn fixed_seed_training_logs_are_identical() {
    let dir = setup();
    let d = dir.path();
    let mut logs = Vec::new();
    for _ in 0..2 {
        let args = ["--config", "tiny.toml", "--data", "out/train.json", "--seed", "7", "--out", "run", "train-qgen"];
        ok(&keyqg(d, &args));
        logs.push(fs::read(d.join("run/qgen.log.jsonl")).unwrap());
        logs.push(fs::read(d.join("run/qgen.ckpt")).unwrap());
    }
    assert_eq!(logs[0], logs[2]);
    assert_eq!(logs[1], logs[3]);
}

#[test]
fn pipeline_rejects_models_from_different_corpora() {
    let dir = setup();
    let d = dir.path();
    ok(&keyqg(d, &common(&["train-extractor", "--kind", "ptrnet"])));
    fs::write(d.join("tiny1.toml"), TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    ok(&keyqg(d, &["--config", "tiny1.toml", "--out", "trend", "prepare-data", "--synthetic", "trend"]));
    ok(&keyqg(d, &["--config", "tiny1.toml", "--out", "trend", "--data", "trend/train.json", "train-qgen"]));
    let out = keyqg(d, &common(&["pipeline", "--extractor", "out/ptrnet.ckpt", "--qgen", "trend/qgen.ckpt", "--input", "out/train.json"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("compatibility"));
}

#[test]
fn gradcheck_passes_for_every_model() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["nes", "ptrnet", "qgen"] {
        let out = keyqg(dir.path(), &["gradcheck", "--kind", kind]);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("0 failures"));
    }
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = keyqg(d, &["--data", "nope.json", "train-qgen"]);
    assert_eq!(missing.status.code(), Some(2));
    fs::write(d.join("bad.toml"), "batch_size = 0\n").unwrap();
    assert_eq!(keyqg(d, &["--config", "bad.toml", "gradcheck", "--kind", "nes"]).status.code(), Some(2));
    fs::write(d.join("broken.json"), "{\"data\": [").unwrap();
    assert_eq!(keyqg(d, &["extract", "--input", "broken.json"]).status.code(), Some(2));
    fs::write(d.join("fake.ckpt"), "not a checkpoint").unwrap();
    let out = keyqg(d, &["evaluate-qgen", "--checkpoint", "fake.ckpt", "--input", "broken.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = keyqg(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
}
