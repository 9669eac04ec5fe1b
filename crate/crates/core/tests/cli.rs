use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn signmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn signmap")
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = signmap(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["georegister", "segment", "metadata-gen", "labels-gen", "detect-changes", "promote", "eval", "simulate"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(signmap(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(signmap(dir.path(), &["georegister", "--out", "x"]).status.code(), Some(1));
    assert_eq!(signmap(dir.path(), &["eval", "--kind", "bogus", "a", "b", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = signmap(dir.path(), &["georegister", "nope/model", "nope.csv", "--out", "reg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn promote_needs_permanence_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("metadata.csv"), "").unwrap();
    let out = signmap(dir.path(), &["promote", "layer", "metadata.csv", "--out", "p"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_threshold_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = signmap(dir.path(), &["--t-d", "-3", "simulate", "--preset", "basic", "--out", "b"]);
    assert_eq!(out.status.code(), Some(1));
}
