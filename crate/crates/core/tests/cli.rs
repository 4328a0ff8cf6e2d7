use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SIM: &str = r#"{"rings": 40, "fault_count": 10, "seed": 5}"#;
const TRAIN_RATE: &str = r#"{"window_len": 8, "channels": [4, 4], "attention_reduction": 2, "epochs": 2}"#;
const TRAIN_ANOMALY: &str =
    r#"{"lstm_hidden": 6, "latent_dim": 3, "decoder_hidden": 6, "pretrain_epochs": 1, "train_epochs": 2}"#;

fn tbm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbm"))
        .args(args)
        .current_dir(dir)
        .env("TBM_LOG", "warn")
        .output()
        .expect("tbm runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tbm(dir, args);
    assert!(
        out.status.success(),
        "tbm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    tbm(dir, args).status.code().expect("exit code")
}

fn write_configs(dir: &Path) {
    fs::write(dir.join("sim.json"), SIM).unwrap();
    fs::write(dir.join("train_rate.json"), TRAIN_RATE).unwrap();
    fs::write(dir.join("train_anomaly.json"), TRAIN_ANOMALY).unwrap();
}

/// simulate, preprocess both tasks, train both models, evaluate, detect.
fn full_run(dir: &Path) {
    write_configs(dir);
    ok(dir, &["simulate", "--config", "sim.json"]);
    ok(dir, &["preprocess", "--task", "rate"]);
    ok(dir, &["preprocess", "--task", "anomaly"]);
    ok(dir, &["train-rate", "--config", "train_rate.json"]);
    ok(dir, &["eval-rate"]);
    ok(dir, &["train-anomaly", "--config", "train_anomaly.json"]);
    ok(dir, &["detect"]);
}

fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.join("data")];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    full_run(a.path());
    full_run(b.path());
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let names: Vec<_> = fa.iter().map(|(p, _)| p.to_string_lossy().into_owned()).collect();
    for expected in [
        "data/geology.csv",
        "data/excavation.csv",
        "data/labels.json",
        "data/rate/fused.csv",
        "data/rate/manifest.json",
        "data/rate/model.json",
        "data/rate/eval.json",
        "data/anomaly/model.json",
        "data/anomaly/verdicts.csv",
        "data/anomaly/detect.json",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    assert_eq!(fa.len(), fb.len());
    for ((pa, da), (pb, db)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        assert!(da == db, "{} differs between runs", pa.display());
    }

    let geo = fs::read_to_string(a.path().join("data/geology.csv")).unwrap();
    let exc = fs::read_to_string(a.path().join("data/excavation.csv")).unwrap();
    assert_eq!(geo.lines().count(), 41);
    assert_eq!(exc.lines().count(), 40 * 50 + 1);
    let fused = fs::read_to_string(a.path().join("data/rate/fused.csv")).unwrap();
    assert!(!fused.contains("NaN"));

    let eval: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("data/rate/eval.json")).unwrap()).unwrap();
    assert!(eval["r2"].as_f64().unwrap().is_finite());
    assert!(eval["mse"].as_f64().unwrap().is_finite());
    let detect: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("data/anomaly/detect.json")).unwrap()).unwrap();
    for key in ["detection_rate", "false_positive_rate"] {
        let v = detect[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
}

#[test]
fn stdout_carries_the_report() {
    let d = TempDir::new().unwrap();
    write_configs(d.path());
    let quiet = ok(d.path(), &["simulate", "--config", "sim.json"]);
    assert!(quiet.stdout.is_empty());
    let loud = ok(d.path(), &["simulate", "--config", "sim.json", "--stdout"]);
    let labels: serde_json::Value = serde_json::from_slice(&loud.stdout).unwrap();
    assert_eq!(labels["fault_windows"].as_array().unwrap().len(), 10);
    assert_eq!(loud.stdout, fs::read(d.path().join("data/labels.json")).unwrap());
}

#[test]
fn seed_flag_overrides_the_config() {
    let d = TempDir::new().unwrap();
    write_configs(d.path());
    ok(d.path(), &["simulate", "--config", "sim.json"]);
    let first = fs::read(d.path().join("data/excavation.csv")).unwrap();
    ok(d.path(), &["simulate", "--config", "sim.json", "--seed", "6"]);
    assert_ne!(first, fs::read(d.path().join("data/excavation.csv")).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("bad.json"), "{ not json").unwrap();
    fs::write(d.path().join("unknown.json"), r#"{"ringz": 3}"#).unwrap();
    fs::write(d.path().join("invalid.json"), r#"{"rows_per_ring": 1}"#).unwrap();
    assert_eq!(code(d.path(), &["simulate", "--config", "bad.json"]), 2);
    assert_eq!(code(d.path(), &["simulate", "--config", "unknown.json"]), 2);
    assert_eq!(code(d.path(), &["simulate", "--config", "invalid.json"]), 2);
}

#[test]
fn io_errors_exit_3() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("blocker"), "a file").unwrap();
    fs::write(d.path().join("sim.json"), r#"{"rings": 5, "fault_count": 0, "out_dir": "blocker/data"}"#).unwrap();
    assert_eq!(code(d.path(), &["simulate", "--config", "sim.json"]), 3);
    assert_eq!(code(d.path(), &["simulate", "--config", "missing.json"]), 3);
    assert_eq!(code(d.path(), &["preprocess", "--task", "rate"]), 3);
}

#[test]
fn schema_errors_exit_4_naming_the_column() {
    let d = TempDir::new().unwrap();
    write_configs(d.path());
    ok(d.path(), &["simulate", "--config", "sim.json"]);
    let path = d.path().join("data/geology.csv");
    let text = fs::read_to_string(&path).unwrap();
    let header = text.lines().next().unwrap();
    let columns: Vec<&str> = header.split(',').collect();
    let dropped = columns.iter().position(|c| *c == "unconfined_compressive_strength").expect("strength column");
    let cut: String = text
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(dropped);
            f.join(",") + "\n"
        })
        .collect();
    fs::write(&path, cut).unwrap();
    let out = tbm(d.path(), &["preprocess", "--task", "rate"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unconfined_compressive_strength"));
}

#[test]
fn tampered_manifest_exits_5() {
    let d = TempDir::new().unwrap();
    full_run(d.path());

    let ckpt_path = d.path().join("data/rate/model.json");
    let mut ckpt: serde_json::Value = serde_json::from_slice(&fs::read(&ckpt_path).unwrap()).unwrap();
    ckpt["manifest_hash"] = "0".repeat(64).into();
    fs::write(&ckpt_path, serde_json::to_vec(&ckpt).unwrap()).unwrap();
    assert_eq!(code(d.path(), &["eval-rate"]), 5);

    let manifest = d.path().join("data/anomaly/manifest.json");
    let mut text = fs::read(&manifest).unwrap();
    text.push(b'\n');
    fs::write(&manifest, text).unwrap();
    assert_eq!(code(d.path(), &["detect"]), 5);
}
