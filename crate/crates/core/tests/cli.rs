use std::path::Path;
use std::process::{Command, Output};

use editlm::sampler::read_tokens;
use editlm::synthcorpus::read_corpus;
use editlm::tokenizer::Tokenizer;
use editlm::trainer::{Checkpoint, TrainData};
use serde_json::Value;

const CONFIG: &str = r#"{
  "seed": 3,
  "grammar": {"min_seconds": 8.0, "max_seconds": 10.0, "n_styles": 2},
  "corpus": {"songs": 4},
  "tokenizer_train": {"steps": 50},
  "model": {"layers": 1, "model_dim": 16, "ff_dim": 32, "encoder_layers": 1},
  "train": {"steps": 2, "batch_size": 2, "prompt_seconds": 1.0},
  "sample": {"candidate_count": 2, "max_new_frames": 40}
}"#;

fn editlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_editlm"))
        .current_dir(dir)
        .args(args)
        .args(["--config", "run.json"])
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = editlm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), CONFIG).unwrap();
    dir
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str::<Value>(line).unwrap()["error"].clone()
}

#[test]
fn edit_keeps_context_frames() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["gen-corpus"]);
    ok(d, &["train-tokenizer"]);
    ok(d, &["train-lm"]);
    let corpus = read_corpus(&d.join("work/corpus.bin")).unwrap();
    let song = corpus
        .songs
        .iter()
        .position(|s| s.sentence_count() >= 4)
        .expect("a song with four sentences");
    let (start, end) = corpus.songs[song].sentence_spans[1];
    let tok = Tokenizer::load(&d.join("work/tokenizer.bin")).unwrap();
    let data = TrainData::new(corpus, &tok, 25, editlm::par::Exec::Sequential).unwrap();
    let original = &data.songs[song].tokens;

    let song_arg = format!("task.song={song}");
    ok(
        d,
        &["edit", "--set", &song_arg, "--set", "task.first_sentence=2", "--set", "task.last_sentence=2"],
    );
    let (header, edited) = read_tokens(&d.join("work/output.tokens")).unwrap();
    assert_eq!(header.meta["command"], "edit");
    let n = header.meta["edit_frames"].as_u64().unwrap() as usize;
    assert_eq!(edited.len(), original.len() - (end - start) + n);
    assert_eq!(edited.slice(0, start), original.slice(0, start));
    assert_eq!(edited.slice(start + n, edited.len()), original.slice(end, original.len()));

    let manifest: Value =
        serde_json::from_slice(&std::fs::read(d.join("work/output.tokens.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "edit");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["artifacts"][0]["path"], "work/output.tokens");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["gen-corpus"]);
    ok(d, &["train-tokenizer"]);
    ok(d, &["train-lm", "--set", "train.steps=0", "--set", "paths.model=work/init.ckpt"]);
    ok(d, &["train-lm", "--set", "train.lr=0", "--set", "train.steps=3"]);
    let init = Checkpoint::load(&d.join("work/init.ckpt")).unwrap();
    let trained = Checkpoint::load(&d.join("work/model.ckpt")).unwrap();
    assert_eq!(trained.step, 3);
    assert_eq!(init.model.params, trained.model.params);
}

#[test]
fn missing_artifact_names_the_path() {
    let dir = workspace();
    let out = editlm(dir.path(), &["train-tokenizer"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_error(&out);
    assert_eq!(err["kind"], "missing_artifact");
    assert!(err["path"].as_str().unwrap().ends_with("work/corpus.bin"));
}

#[test]
fn schema_errors_name_the_field() {
    let dir = workspace();
    let out = editlm(dir.path(), &["gen-corpus", "--set", "model.layerz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_error(&out).to_string().contains("model.layerz"));

    let out = editlm(dir.path(), &["gen-corpus", "--set", "train.steps=\"many\""]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_error(&out).to_string().contains("train.steps"));
    assert!(!dir.path().join("work/corpus.bin").exists());
}
