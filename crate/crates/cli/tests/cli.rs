use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tdu(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdu"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TDU_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn tdu")
}

fn ok_json(args: &[&str], cwd: &Path) -> Value {
    let out = tdu(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

const SMALL: [&str; 8] = ["--hidden", "16", "--heads", "2", "--steps", "20", "--eval-every", "10"];

fn dataset(dir: &Path) {
    ok_json(
        &["gen-data", "--out", "d", "--seed", "2", "--train-scenes", "16", "--val-scenes", "4", "--test-scenes", "4"],
        dir,
    );
    ok_json(&["preprocess", "--data", "d", "--seed", "2"], dir);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tdu(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(tdu(&["train", "--data", "d", "--out", "o", "--frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(tdu(&["ablate", "--variant", "wider", "--data", "d", "--out", "o"], dir.path()).status.code(), Some(2));
    let help = tdu(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("grad-check"));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = tdu(&["train", "--data", "missing", "--out", "o", "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn grad_check_passes_on_the_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(&["grad-check"], dir.path());
    assert_eq!(v["pass"], true);
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-5);
}

#[test]
fn train_eval_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    for f in ["scenes.jsonl", "vocab.txt", "train.jsonl", "val.jsonl", "test.jsonl"] {
        assert!(dir.join("d").join(f).exists(), "{f}");
    }
    let mut args = vec!["train", "--data", "d", "--out", "run", "--seed", "3"];
    args.extend(SMALL);
    let summary = ok_json(&args, dir);
    for key in ["best_step", "val_acc", "test_acc", "confusion"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
    let log = std::fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [10, 20]);

    let metrics = ok_json(&["eval", "--data", "d", "--checkpoint", "run/checkpoints/step-000020.ckpt"], dir);
    for key in ["TP", "FP", "FN", "TN", "accuracy"] {
        assert!(metrics.get(key).is_some(), "{key}");
    }
    let total: u64 = ["TP", "FP", "FN", "TN"].iter().map(|k| metrics[k].as_u64().unwrap()).sum();

    let out = tdu(&["predict", "--data", "d", "--checkpoint", "run/last.ckpt"], dir);
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len() as u64, total);
    let p = lines[0]["p"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(lines[0]["id"].is_string() && lines[0]["label"].is_u64());
}

#[test]
fn resume_matches_a_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    let mut straight = vec!["train", "--data", "d", "--out", "a", "--seed", "5"];
    straight.extend(SMALL);
    let a = ok_json(&straight, dir);

    let half = ["train", "--data", "d", "--out", "b", "--seed", "5", "--hidden", "16", "--heads", "2", "--steps", "10", "--eval-every", "10"];
    ok_json(&half, dir);
    let b = ok_json(&["train", "--data", "d", "--out", "b", "--resume", "--hidden", "16", "--heads", "2", "--steps", "20"], dir);
    assert_eq!(a, b);
    for f in ["last.ckpt", "train_log.jsonl", "checkpoints/step-000020.ckpt"] {
        assert_eq!(std::fs::read(dir.join("a").join(f)).unwrap(), std::fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pretrained_checkpoint_initializes_training() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    let v = ok_json(
        &["pretrain", "--data", "d", "--out", "pre.ckpt", "--hidden", "16", "--heads", "2", "--steps", "10", "--seed", "1"],
        dir,
    );
    assert_eq!(v["steps"], 10);
    let mut args = vec!["train", "--data", "d", "--out", "run", "--init", "pre.ckpt"];
    args.extend(SMALL);
    ok_json(&args, dir);

    let late = tdu(&["pretrain", "--data", "d", "--out", "x.ckpt", "--fusion", "late", "--hidden", "16", "--heads", "2"], dir);
    assert_eq!(late.status.code(), Some(1));
}

#[test]
fn ablations_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    for variant in ["late-fusion", "few-contexts", "no-pretraining"] {
        let mut args = vec!["ablate", "--variant", variant, "--data", "d", "--out", variant];
        args.extend(SMALL);
        let v = ok_json(&args, dir);
        assert_eq!(v["variant"], variant);
    }
    let few = ok_json(
        &["eval", "--data", "d", "--checkpoint", "few-contexts/last.ckpt", "--few-contexts"],
        dir,
    );
    assert!(few["accuracy"].is_number());
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dataset(dir);
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"model": {"hidden": 16, "heads": 2}, "train": {"steps": 30, "eval_every": 10}}"#,
    )
    .unwrap();
    ok_json(&["train", "--data", "d", "--out", "run", "--config", "cfg.json", "--steps", "20"], dir);
    let log = std::fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run/train_config.json")).unwrap()).unwrap();
    assert_eq!(saved["steps"], 20);
    assert_eq!(saved["eval_every"], 10);
    assert_eq!(saved["lr"], 8e-5);
}
