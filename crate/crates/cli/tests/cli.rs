use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protodisent::checkpoint::ModelCheckpoint;
use protodisent::corpus::read_corpus;
use protodisent::disent::ProtoDisentModel;
use protodisent::training::TrainConfig;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_protodisent"));
    c.env_remove("PROTODISENT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus and a briefly trained model inside `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&["gen-data", "--out", s(&data), "--utterances-per-speaker", "6", "--seed", "4"]);
    let model = dir.join("model");
    ok(&[
        "train", "--corpus", s(&data.join("corpus.tsv")), "--out", s(&model), "--steps", "3",
        "--pretrain-steps", "3", "--d-model", "16", "--batch-size", "4", "--seed", "9",
    ]);
    (data.join("corpus.tsv"), model.join("model.json"))
}

fn first_utt(corpus: &Path) -> String {
    read_corpus(corpus).unwrap().utterances[0].utt_id.clone()
}

#[test]
fn failures_have_distinct_exit_codes_and_one_line_messages() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(dir.path());
    let utt = first_utt(&corpus);
    let out = dir.path().join("o");

    let bad_k = run(&["synth", "--checkpoint", s(&model), "--corpus", s(&corpus), "--text", "1 2", "--prompt-utt", &utt, "--k", "9", "--out", s(&out)]);
    assert_eq!(bad_k.status.code(), Some(5));
    assert!(stderr(&bad_k).contains("0..=8"), "{}", stderr(&bad_k));
    assert_eq!(stderr(&bad_k).trim_end().lines().count(), 1);

    let missing = run(&["synth", "--checkpoint", s(&dir.path().join("nope.json")), "--corpus", s(&corpus), "--text", "1", "--prompt-utt", &utt, "--k", "1", "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(stderr(&missing).contains("nope.json"));

    let broken = dir.path().join("broken.tsv");
    let text = std::fs::read_to_string(&corpus).unwrap();
    std::fs::write(&broken, text.replacen("\t0\t", "\tzero\t", 1)).unwrap();
    std::fs::copy(corpus.with_extension("tsv.meta.json"), dir.path().join("broken.tsv.meta.json")).unwrap();
    let parse = run(&["train", "--corpus", s(&broken), "--out", s(&out)]);
    assert_eq!(parse.status.code(), Some(4), "{}", stderr(&parse));

    let untrained = dir.path().join("untrained.json");
    let c = read_corpus(&corpus).unwrap();
    let cfg = TrainConfig { d_model: 16, ..TrainConfig::default() };
    let m = ProtoDisentModel::new(cfg.model_config(&c)).unwrap();
    ModelCheckpoint::new(m, cfg).unwrap().save(&untrained).unwrap();
    let state = run(&["synth", "--checkpoint", s(&untrained), "--corpus", s(&corpus), "--text", "1", "--prompt-utt", &utt, "--k", "1", "--out", s(&out)]);
    assert_eq!(state.status.code(), Some(6), "{}", stderr(&state));

    let tampered = dir.path().join("tampered.json");
    let json = std::fs::read_to_string(&model).unwrap();
    std::fs::write(&tampered, json.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
    let integrity = run(&["synth", "--checkpoint", s(&tampered), "--corpus", s(&corpus), "--text", "1", "--prompt-utt", &utt, "--k", "1", "--out", s(&out)]);
    assert_eq!(integrity.status.code(), Some(7), "{}", stderr(&integrity));

    let unknown = run(&["train", "--corpus", s(&corpus), "--out", s(&out), "--no-such-key", "1"]);
    assert_eq!(unknown.status.code(), Some(5));
    assert!(stderr(&unknown).contains("no_such_key"));

    assert_eq!(run(&["train", "--corpus", s(&corpus)]).status.code(), Some(2));
}

fn digest(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

#[test]
fn training_and_sweeps_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(dir.path());
    let again = dir.path().join("model2");
    ok(&[
        "train", "--corpus", s(&corpus), "--out", s(&again), "--steps", "3", "--pretrain-steps", "3",
        "--d-model", "16", "--batch-size", "4", "--seed", "9",
    ]);
    assert_eq!(digest(&model), digest(&again.join("model.json")));
    assert_eq!(digest(&model.with_file_name("loss_curve.tsv")), digest(&again.join("loss_curve.tsv")));

    let sweep = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "sweep", "--checkpoint", s(&model), "--corpus", s(&corpus), "--out", s(&out), "--speakers", "F01",
            "--asr-epochs", "1", "--seed", "3",
        ]);
        out
    };
    let (a, b) = (sweep("sw1"), sweep("sw2"));
    for f in ["sweep.txt", "sweep.tsv", "sweep_cells.tsv", "sweep.json"] {
        assert_eq!(digest(&a.join(f)), digest(&b.join(f)), "{f}");
    }
    let table = std::fs::read_to_string(a.join("sweep.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("ASR + 0%\t") && rows[5].starts_with("ASR + 100%\t"));

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sweep");
    assert_eq!(manifest["seed"], 3);
    for o in manifest["outputs"].as_array().unwrap() {
        let p = Path::new(o["path"].as_str().unwrap());
        assert!(p.starts_with(&a));
        assert_eq!(o["sha256"].as_str().unwrap(), digest(p));
    }
    let files: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.iter().filter(|f| f.to_string_lossy().contains("manifest")).count(), 1);
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let out = bin()
        .args(["gen-data", "--out", s(&a), "--utterances-per-speaker", "2", "--seed", "5"])
        .env("PROTODISENT_SEED", "8")
        .output()
        .unwrap();
    assert!(out.status.success());
    let b = dir.path().join("b");
    let out = bin()
        .args(["gen-data", "--out", s(&b), "--utterances-per-speaker", "2"])
        .env("PROTODISENT_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(digest(&a.join("corpus.tsv")), digest(&b.join("corpus.tsv")));
    let manifest = std::fs::read_to_string(b.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 5"));
}

#[test]
fn synthesis_and_reconstruction_write_corpus_records() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(dir.path());
    let utt = first_utt(&corpus);
    let out = dir.path().join("syn");
    ok(&["synth", "--checkpoint", s(&model), "--corpus", s(&corpus), "--text", "1 2 3", "--prompt-utt", &utt, "--k", "2", "--out", s(&out)]);
    let recs = protodisent::corpus::read_records(std::io::BufReader::new(std::fs::File::open(out.join("synth.tsv")).unwrap())).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!((recs[0].condition, recs[0].synthetic), (2, true));
    assert_eq!(recs[0].source_utt_id.as_deref(), Some(utt.as_str()));

    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--checkpoint", s(&model), "--corpus", s(&corpus), "--oracle-text", "--out", s(&rec), "--speakers", "M01"]);
    let recs = protodisent::corpus::read_records(std::io::BufReader::new(std::fs::File::open(rec.join("reconstructions.tsv")).unwrap())).unwrap();
    assert_eq!(recs.len(), 6);
    assert!(recs.iter().all(|u| u.condition == 0 && u.speaker_id == "M01"));

    let both = run(&["reconstruct", "--checkpoint", s(&model), "--corpus", s(&corpus), "--oracle-text", "--asr", "x.json", "--out", s(&rec)]);
    assert_eq!(both.status.code(), Some(2));
}
