use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pfi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfi")).args(args).output().expect("spawn pfi")
}

fn ok(args: &[&str]) {
    let out = pfi(args);
    assert!(out.status.success(), "pfi {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn simulate(dir: &Path, name: &str, seed: &str) -> String {
    let out = dir.join(name);
    let out = out.to_str().unwrap();
    ok(&["simulate", "--network", "toggle", "--n", "40", "--K", "2", "--dt", "0.2", "--seed", seed, "--out", out]);
    format!("{out}/dataset.csv")
}

#[test]
fn simulate_is_deterministic_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = simulate(tmp.path(), "a", "5");
    let b = simulate(tmp.path(), "b", "5");
    let c = simulate(tmp.path(), "c", "6");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let manifest = tmp.path().join("a/manifest.json");
    let m: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    assert_eq!(m["config"]["command"], "simulate");
    assert!(m["outputs"]["dataset.csv"].is_string());

    let replay = tmp.path().join("replay");
    ok(&["run", manifest.to_str().unwrap(), "--out", replay.to_str().unwrap()]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(replay.join("dataset.csv")).unwrap());
}

#[test]
fn score_from_another_dataset_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let a = simulate(tmp.path(), "a", "1");
    let b = simulate(tmp.path(), "b", "2");
    let score_dir = tmp.path().join("score");
    ok(&["train-score", "--data", &a, "--epochs", "2", "--hidden", "8,8", "--out", score_dir.to_str().unwrap()]);
    let score = score_dir.join("score.json");
    let out = pfi(&["validate-score", "--data", &b, "--score", score.to_str().unwrap(), "--samples", "10", "--steps", "5", "--out", tmp.path().join("v").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trained on dataset"));
}

#[test]
fn deterministic_infer_writes_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path(), "data", "3");
    let out = tmp.path().join("infer");
    ok(&[
        "infer", "--data", &data, "--noise", "deterministic", "--force", "linear", "--distance", "gaussian-w2",
        "--optimizer", "lbfgs", "--iterations", "20", "--waive-flags", "--out", out.to_str().unwrap(),
    ]);
    let ck: serde_json::Value = serde_json::from_slice(&fs::read(out.join("force.json")).unwrap()).unwrap();
    assert_eq!(ck["kind"], "force");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("loss_report.json")).unwrap()).unwrap();
    assert!(report.is_object());
}

#[test]
fn infer_without_score_needs_deterministic_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path(), "data", "3");
    let out = pfi(&["infer", "--data", &data, "--noise", "cle", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn analyze_ou_writes_unregularised_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ou");
    ok(&[
        "analyze-ou", "--include-zero", "--lambda-grid", "1e-2,1,3", "--dhat-points", "5", "--variance-n", "1000",
        "--variance-dt", "0.1", "--draws", "4", "--out", out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("bias_vs_lambda.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().any(|r| r.starts_with("0,")));
    let dhat = fs::read_to_string(out.join("bias_vs_dhat.csv")).unwrap();
    let min_row = dhat.lines().find(|l| l.ends_with(",1")).unwrap();
    assert!(min_row.starts_with("8,"), "D̂ minimum row {min_row}");
}

#[test]
fn box_initial_condition_survives_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    ok(&["simulate", "--network", "toggle", "--n", "20", "--K", "1", "--init-box", "0.5,2", "--out", a.to_str().unwrap()]);
    let b = tmp.path().join("b");
    ok(&["run", a.join("manifest.json").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(b.join("dataset.csv")).unwrap());
    assert!(!pfi(&["simulate", "--network", "toggle", "--init-box", "1,2,3", "--out", tmp.path().join("c").to_str().unwrap()]).status.success());
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"n": 3}"#).unwrap();
    assert!(!pfi(&["run", cfg.to_str().unwrap()]).status.success());
}
