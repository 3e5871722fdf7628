use std::path::Path;
use std::process::{Command, Output};

use deconfounder_core::data::load_dataset;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deconfounder"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_pipeline() -> serde_json::Value {
    serde_json::json!({
        "factor": { "hidden_units": 8, "head_units": 8, "epochs": 2 },
        "substitute_samples": 2,
        "checks": { "replicas": 5, "mc_samples": 2 },
        "rmsn": {
            "numerator": { "dropout": 0.1, "state_size": 4, "batch_size": 64, "learning_rate": 0.01, "max_grad_norm": 2.0, "epochs": 1 },
            "denominator": { "dropout": 0.1, "state_size": 4, "batch_size": 64, "learning_rate": 0.01, "max_grad_norm": 1.0, "epochs": 1 },
            "prediction": { "dropout": 0.1, "state_size": 4, "batch_size": 64, "learning_rate": 0.01, "max_grad_norm": 0.5, "epochs": 1 }
        }
    })
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn simulate_train_check_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let model = dir.path().join("factor.json");
    let d = data.to_str().unwrap();
    let m = model.to_str().unwrap();
    ok(&["simulate", "--n-patients", "80", "--gamma", "0.5", "--seed", "3", "--out", d]);
    let ds = load_dataset(&data).unwrap();
    assert_eq!(ds.len(), 80);
    assert!(ds.has_oracle_z());

    let stdout = ok(&["train-factor", "--data", d, "--epochs", "2", "--d-z", "2", "--out", m]);
    assert!(stdout.contains("best validation loss"));
    assert!(model.exists());

    let pv = dir.path().join("pvalues.csv");
    let stdout = ok(&["check", "--data", d, "--model", m, "--replicas", "5", "--mc-samples", "2", "--out", pv.to_str().unwrap()]);
    assert!(stdout.contains("mean p-value"));
    let text = std::fs::read_to_string(&pv).unwrap();
    assert!(text.starts_with("t,p_value,n_active"));
    assert!(text.lines().count() > 10);

    let spec = dir.path().join("spec.json");
    write_json(
        &spec,
        &serde_json::json!({
            "scenario": { "kind": "confounded" },
            "outcome": "msm",
            "data": { "kind": "file", "path": d },
            "pipeline": tiny_pipeline(),
        }),
    );
    let coef = dir.path().join("coef.csv");
    let result = dir.path().join("result.json");
    let stdout = ok(&[
        "evaluate",
        "--config",
        spec.to_str().unwrap(),
        "--scenario",
        "deconfounded-dz2",
        "--factor-checkpoint",
        m,
        "--coefficients",
        coef.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
    ]);
    assert!(stdout.starts_with("deconfounded-dz2 msm rmse"));
    let coef_text = std::fs::read_to_string(&coef).unwrap();
    assert!(coef_text.starts_with("model,feature,value"));
    assert!(coef_text.contains("outcome,z1_lag,"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    assert!(json["rmse"].as_f64().unwrap() > 0.0);
}

#[test]
fn tumor_generator_writes_groups() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tumor.jsonl");
    ok(&["simulate", "--generator", "tumor", "--n-patients", "40", "--out", data.to_str().unwrap()]);
    let ds = load_dataset(&data).unwrap();
    assert!(!ds.is_empty() && ds.len() <= 40);
    assert_eq!((ds.k, ds.covariate_dim), (2, 1));
    assert!(ds.patients.iter().all(|p| p.group.is_some()));
}

fn sweep_config(dir: &Path, learning_rate: f64) -> std::path::PathBuf {
    let mut pipeline = tiny_pipeline();
    pipeline["factor"]["learning_rate"] = serde_json::json!(learning_rate);
    let cfg = dir.join("sweep.json");
    write_json(
        &cfg,
        &serde_json::json!({
            "gammas": [0.0, 0.6],
            "n_datasets": 1,
            "outcomes": ["msm"],
            "d_z": [1],
            "data": { "kind": "synthetic", "n_patients": 60 },
            "pipeline": pipeline,
            "master_seed": 5,
        }),
    );
    cfg
}

#[test]
fn sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path(), 0.01);
    let out = dir.path().join("out");
    let stdout = ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("confounded"));
    for file in ["results.csv", "summary.csv", "pvalues.csv", "manifest.json", "plots/rmse_msm.svg"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let first = std::fs::read(out.join("results.csv")).unwrap();
    let out2 = dir.path().join("out2");
    ok(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(out2.join("results.csv")).unwrap());

    let stdout = ok(&["report", out.join("results.csv").to_str().unwrap()]);
    assert!(stdout.contains("mean rmse"));
    assert_eq!(stdout.lines().count(), 1 + 2 * 4);
}

#[test]
fn partial_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path(), -1.0);
    let out = run(&["sweep", "--config", cfg.to_str().unwrap(), "--gammas", "0.5", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let results = std::fs::read_to_string(dir.path().join("o/results.csv")).unwrap();
    assert!(results.contains("failed"));
}

#[test]
fn bad_input_is_an_error() {
    let out = run(&["evaluate", "--scenario", "nonsense"]);
    assert!(!out.status.success());
    let out = run(&["train-factor", "--data", "/nonexistent/data.jsonl", "--out", "/tmp/x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
