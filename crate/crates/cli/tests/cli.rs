use std::path::Path;
use std::process::{Command, Output};

use chunklm::checkpoint::{save_model, Precision};
use chunklm::{Model, ModelConfig, ModelParams};

fn chunklm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunklm"))
        .args(args)
        .output()
        .expect("spawn chunklm")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn zero_checkpoint(dir: &Path) -> std::path::PathBuf {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg.clone(), ModelParams::zeros(&cfg)).unwrap();
    let path = dir.join("zero");
    save_model(&path, &model, Precision::F64).unwrap();
    path
}

#[test]
fn zero_model_scores_eight_bits_per_byte() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = zero_checkpoint(dir.path());
    let corpus = dir.path().join("text");
    std::fs::write(&corpus, b"the quick brown fox jumps over the lazy dog").unwrap();
    let out = chunklm(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&corpus)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("8.0000 bits/byte"), "{}", stdout(&out));
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let out = chunklm(&["gradcheck", "--probes", "40"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("max relative error"));
}

#[test]
fn make_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for path in [&a, &b] {
        let out = chunklm(&["make-synth", "--samples", "20", "--gap", "64", "--seed", "9", "--out", p(path)]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "d_model = 16\nnot_a_key = 3\n").unwrap();
    let corpus = dir.path().join("text");
    std::fs::write(&corpus, b"abcdefgh").unwrap();
    let out = chunklm(&["train", "--config", p(&cfg), "--corpus", p(&corpus), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("not_a_key"), "{}", stderr(&out));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(chunklm(&[]).status.code(), Some(1));
    assert_eq!(chunklm(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(chunklm(&["gradcheck", "--ablate", "no_everything"]).status.code(), Some(1));
    assert_eq!(chunklm(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let out = chunklm(&["eval", "--checkpoint", "/definitely/missing", "--corpus", "/also/missing"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/definitely/missing"));
}

#[test]
fn train_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("text");
    std::fs::write(&corpus, b"abcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabcabc").unwrap();
    let run = dir.path().join("run");
    let out = chunklm(&[
        "train",
        "--corpus",
        p(&corpus),
        "--out",
        p(&run),
        "--config",
        "/dev/null",
        "--d_model",
        "8",
        "--d_hidden",
        "8",
        "--max_steps",
        "2",
        "--warmup_steps",
        "1",
        "--chunk-size",
        "16",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(run.join("checkpoint").is_file());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");

    let ckpt = run.join("checkpoint");
    let gen = chunklm(&["generate", "--checkpoint", p(&ckpt), "--prompt", "abc", "--max-new", "5"]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert!(gen.stdout.starts_with(b"abc"));
    assert_eq!(gen.stdout.len(), 3 + 5 + 1);
}
