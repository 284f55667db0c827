use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"{
  "model": {
    "data_dim": 2,
    "latent_dims": [2, 2],
    "decoder": "gaussian",
    "evidence_encoder": { "hidden": [8], "activation": "relu", "output_activation": "identity" },
    "latent_encoder": { "hidden": [8], "activation": "relu", "output_activation": "identity" },
    "posterior_head": { "hidden": [8], "activation": "relu", "output_activation": "identity" },
    "prior_head": { "hidden": [8], "activation": "relu", "output_activation": "identity" },
    "decoder_net": { "hidden": [8], "activation": "relu", "output_activation": "identity" }
  },
  "training": { "batch_size": BATCH, "epochs": EPOCHS, "dynamic_binarization": false },
  "dataset": { "kind": "synthetic", "generator": { "kind": "checkerboard" }, "n": 200, "valid_n": 50 },
  "checkpoint_every": 1
}"#;

fn sere(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sere")).args(args).env_remove("SERE_SEED").output().expect("binary runs")
}

fn write_config(dir: &Path, batch: usize, epochs: usize) -> String {
    let path = dir.join("config.json");
    let text = CONFIG.replace("BATCH", &batch.to_string()).replace("EPOCHS", &epochs.to_string());
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("a JSON line")).unwrap()
}

fn train(dir: &Path, epochs: usize) -> Output {
    let cfg = write_config(dir, 50, epochs);
    let out = dir.join("run");
    sere(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"])
}

#[test]
fn one_epoch_writes_one_metrics_row_and_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), 1);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&out);
    assert_eq!(summary["epochs"], 1);
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.starts_with("epoch,beta,lr,train_elbo,valid_elbo,kl_1,kl_2,"));
    assert!(dir.path().join("run/final.ckpt").exists());
    assert!(dir.path().join("run/config.resolved.json").exists());
}

#[test]
fn eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), 1).status.success());
    let ckpt = dir.path().join("run/final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let a = sere(&["eval", "--ckpt", ckpt, "--iw-samples", "1"]);
    let b = sere(&["eval", "--ckpt", ckpt, "--iw-samples", "1"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let r = json(&a);
    assert_eq!(r["rows"], 50);
    assert_eq!(r["iwae_samples"], 1);
    assert!(r["elbo"].as_f64().unwrap().is_finite());
}

#[test]
fn iwae_tightens_with_more_samples() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), 3).status.success());
    let ckpt = dir.path().join("run/final.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let r = json(&sere(&["eval", "--ckpt", ckpt, "--iw-samples", "200"]));
    assert!(r["iwae"].as_f64().unwrap() >= r["elbo"].as_f64().unwrap());
}

#[test]
fn seed_override_changes_eval_noise() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), 1).status.success());
    let ckpt = dir.path().join("run/final.ckpt");
    let run = |seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_sere"))
            .args(["eval", "--ckpt", ckpt.to_str().unwrap(), "--iw-samples", "5"])
            .env("SERE_SEED", seed)
            .output()
            .unwrap()
    };
    let (a, b) = (run("7"), run("8"));
    assert!(a.status.success() && b.status.success());
    assert_eq!(json(&a)["seed"], 7);
    assert_ne!(json(&a)["iwae"], json(&b)["iwae"]);
    assert_eq!(run("not-a-number").status.code(), Some(1));
}

#[test]
fn resume_continues_the_metrics_stream() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), 2).status.success());
    let full = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();

    let other = tempfile::tempdir().unwrap();
    assert!(train(other.path(), 1).status.success());
    let cfg = write_config(other.path(), 50, 2);
    let out = other.path().join("run");
    let ckpt = out.join("checkpoints/epoch-00001.ckpt");
    let r = sere(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--resume", ckpt.to_str().unwrap(), "--quiet"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let resumed = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    // identical except the wall-clock column
    let strip = |s: &str| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&full), strip(&resumed));
}

#[test]
fn sample_writes_the_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), 1).status.success());
    let ckpt = dir.path().join("run/final.ckpt");
    let out = dir.path().join("samples");
    let r = sere(&["sample", "--ckpt", ckpt.to_str().unwrap(), "--count", "4", "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    let written = json(&r)["written"].as_array().unwrap().clone();
    assert_eq!(written.len(), 1);
    let csv = std::fs::read_to_string(written[0].as_str().unwrap()).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| l.chars().next().is_some_and(|c| c == '-' || c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 4);
}

#[test]
fn verify_factorization_passes() {
    let out = sere(&["verify", "--suite", "factorization", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let report = json(&out);
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn invalid_batch_size_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1, 1);
    let out = dir.path().join("run");
    let r = sere(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
}

#[test]
fn missing_checkpoint_is_reported() {
    let r = sere(&["eval", "--ckpt", "/definitely/not/here.ckpt"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("not found"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(sere(&["bogus"]).status.code(), Some(1));
    assert_eq!(sere(&["train"]).status.code(), Some(1));
    assert_eq!(sere(&["eval", "--ckpt", "x", "--iw-samples", "0"]).status.code(), Some(1));
    assert_eq!(sere(&["--help"]).status.code(), Some(0));
}
