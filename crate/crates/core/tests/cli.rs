//! End-to-end runs of the `geoproto` binary: exit codes and run-directory contents.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set", "image_size=32", "--set", "channels=4", "--set", "grid=2", "--set", "heldout_episodes=2",
];

fn geoproto(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoproto")).args(args).output().unwrap()
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    PathBuf::from(stdout.lines().last().expect("run directory on stdout"))
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn zero_episodes_writes_initial_checkpoint_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut args = vec!["train", "--seed", "3", "--out", out, "--set", "episodes=0"];
    args.extend_from_slice(&SMALL);
    let o = geoproto(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("train_"));
    assert!(dir.to_str().unwrap().ends_with("_3"));
    let files = names(&dir);
    let cks: Vec<_> = files.iter().filter(|f| f.ends_with(".gprt")).collect();
    assert_eq!(cks, ["ck_0.gprt"]);
    assert!(files.contains(&"config.txt".to_string()));
    let echo = std::fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(echo.contains("episodes=0"));
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "# comment\nchannels = 8\nwidth_multiplier = 2\n").unwrap();
    let o = geoproto(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("width_multiplier"));
    assert_eq!(names(tmp.path()), ["bad.cfg"], "no run directory on config errors");
}

#[test]
fn bad_override_and_bad_flag_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(geoproto(&["train", "--out", out, "--set", "bins=1"]).status.code(), Some(2));
    assert_eq!(geoproto(&["train", "--out", out, "--set", "channels"]).status.code(), Some(2));
    assert_eq!(geoproto(&["train", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(geoproto(&["export-episodes", "--out", out, "--split", "dev"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope/ck_10");
    let o = geoproto(&["eval", "--ckpt", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_abort() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("ck_0.gprt");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    let o = geoproto(&["eval", "--ckpt", ck.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_writes_records_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut args = vec!["train", "--out", out, "--set", "episodes=0"];
    args.extend_from_slice(&SMALL);
    let train = run_dir(&geoproto(&args));
    let ck = train.join("ck_0");
    let o = geoproto(&[
        "eval", "--ckpt", ck.to_str().unwrap(), "--out", out, "--episodes", "3", "--domain", "source",
        "--export-maps",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = run_dir(&o);
    let files = names(&dir);
    for f in ["config.txt", "maps", "records.csv", "summary.csv"] {
        assert!(files.contains(&f.to_string()), "{f} missing from {files:?}");
    }
    let records = std::fs::read_to_string(dir.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 4);
    assert!(!names(&dir.join("maps")).is_empty());
}

#[test]
fn export_episodes_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let mut args = vec!["export-episodes", "--out", out, "--episodes", "2", "--split", "train"];
    args.extend_from_slice(&SMALL);
    let o = geoproto(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(run_dir(&o).join("episodes/manifest.txt")).unwrap();
    let entries = geoproto::episodes::parse_manifest(&text).unwrap();
    assert_eq!(entries.len(), 2);
}
