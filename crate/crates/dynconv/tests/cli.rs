mod common;

use std::path::Path;
use std::process::{Command, Output};

fn dynconv(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dynconv"))
        .args(args)
        .arg("--config")
        .arg(dir.join("config.in.toml"))
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.in.toml"), common::tiny_config().to_toml().unwrap()).unwrap();
    dir
}

#[test]
fn train_verify_ponder() {
    let dir = setup();
    let d = dir.path();
    dynconv(d, &["train", "--seed", "3", "--theta", "0.5", "--alpha", "5", "--criterion", "net", "--epochs", "2", "--deterministic", "--out", "run"]);
    for f in ["metrics.csv", "model.json", "config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let saved = std::fs::read_to_string(d.join("run/config.toml")).unwrap();
    let saved = dynconv::config::Config::from_toml(&saved).unwrap();
    assert_eq!((saved.train.seed, saved.train.theta, saved.train.alpha, saved.train.epochs), (3, 0.5, 5.0, 2));
    assert_eq!(saved.train.criterion, dynconv::config::CriterionName::Net);

    let out = dynconv(d, &["verify", "--checkpoint", "run/model.json", "--trials", "10", "--out", "run"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));

    dynconv(d, &["ponder", "--checkpoint", "run/model.json", "--images", "3", "--out", "pond"]);
    for i in 0..3 {
        let pgm = std::fs::read(d.join(format!("pond/ponder_{i}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    }
    let csv = std::fs::read_to_string(d.join("pond/ponder.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 32 * 32);
}

#[test]
fn deterministic_outputs_repeat() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        dynconv(d, &["train", "--deterministic", "--epochs", "2", "--out", out]);
        dynconv(d, &["bench", "--deterministic", "--out", out]);
    }
    for f in ["metrics.csv", "bench.csv"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let bench = std::fs::read_to_string(d.join("a/bench.csv")).unwrap();
    assert!(bench.starts_with("density,"));
    assert!(!bench.contains("_ms"));
}

#[test]
fn criterion_spellings() {
    let dir = setup();
    for c in ["net", "per_layer", "net_bounds"] {
        dynconv(dir.path(), &["train", "--criterion", c, "--epochs", "1", "--out", c]);
    }
}

#[test]
fn bad_input_fails() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_dynconv"))
        .args(["train", "--theta", "2", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta"));
    let out = Command::new(env!("CARGO_BIN_EXE_dynconv"))
        .args(["train", "--criterion", "sometimes"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    std::fs::write(dir.path().join("bad.toml"), "[model]\nnope = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dynconv"))
        .args(["verify", "--config"])
        .arg(dir.path().join("bad.toml"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
