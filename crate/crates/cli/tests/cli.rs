//! Drives the `lipkit` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lipkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec!["gen-data", "--out", d, "--classes", "3", "--per-class", "6", "--frames", "8", "--size", "20", "--seed", "4"];
    args.extend_from_slice(extra);
    let out = lipkit(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const TINY: &str = r#"{
    "model": {
        "frontend": {"widths": [2, 4], "blocks": [1, 1]},
        "backend": {"layers": 1, "hidden": 4, "bidirectional": true, "inter_layer_dropout": 0.0, "init": "scaled"},
        "num_classes": 3
    },
    "recipe": {"batch": 6, "base_batch": 6, "base_lr": 0.002, "total_epochs": 2},
    "data": {"resize": null, "crop": 16}
}"#;

#[test]
fn gen_train_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &[]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 18);

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");
    let (c, d, r) = (cfg.to_str().unwrap(), data.to_str().unwrap(), run.to_str().unwrap());
    let out = lipkit(&["train", "--config", c, "--data", d, "--out", r]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,phase,lr,loss,acc\n"));
    assert_eq!(metrics.lines().count(), 5);

    let preds = tmp.path().join("preds.csv");
    let ckpt = run.join("best.lkpt");
    let out = lipkit(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", d, "--split", "val", "--json", "--predictions",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(fs::read_to_string(&preds).unwrap().lines().count() > 1);
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &[]);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"recipe": {"learning_rate": 0.1}}"#).unwrap();
    let d = data.to_str().unwrap();
    let out = lipkit(&["train", "--config", cfg.to_str().unwrap(), "--data", d, "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let out = lipkit(&["ablate", "--suite", "optimizers", "--data", d, "--out", tmp.path().join("a").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, TINY).unwrap();
    let missing = tmp.path().join("nothing");
    let out = lipkit(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", missing.to_str().unwrap(), "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error: "));
}

#[test]
fn numeric_failures_exit_with_4() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &[]);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, TINY.replace("0.002", "1e30")).unwrap();
    let out = lipkit(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn align_writes_one_clip_per_input() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen(&data, &["--jitter"]);
    let out_dir = tmp.path().join("aligned");
    let out = lipkit(&[
        "align", "--frames", data.join("clips").to_str().unwrap(), "--landmarks", data.join("landmarks").to_str().unwrap(),
        "--template", data.join("template.json").to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 18);

    // Missing landmarks for a clip is a data error.
    let empty = tmp.path().join("marks.json");
    fs::write(&empty, "{}").unwrap();
    let out = lipkit(&[
        "align", "--frames", data.join("clips").to_str().unwrap(), "--landmarks", empty.to_str().unwrap(),
        "--template", data.join("template.json").to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}
