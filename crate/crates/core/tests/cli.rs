use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use sgd_stability::cli::{self, EXIT_CONFIG, EXIT_OK, EXIT_PRECONDITION};

fn write_config(dir: &Path, cfg: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_in(dir: &Path, cfg: &Value, command: &str) -> i32 {
    let config = write_config(dir, cfg);
    let out = dir.join("out");
    cli::run([
        "sgd-stability",
        command,
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
    ])
}

fn scalar_config(grid: Vec<f64>) -> Value {
    json!({
        "task": { "kind": "linear", "param_dim": 2, "sample_count": 1, "seed": 3, "gram": [[1.0]] },
        "eta_grid": grid,
        "estimator": { "n": 32, "trials": 16, "seed": 1 },
        "experiments": ["sweep"]
    })
}

fn coupled_config(eta: f64) -> Value {
    json!({
        "task": { "kind": "linear", "param_dim": 4, "sample_count": 2, "seed": 5, "gram": [[2.0, 1.0], [1.0, 2.0]] },
        "eta": eta,
        "estimator": { "n": 256, "trials": 64, "seed": 1 },
        "certify": { "resolution": 512 },
        "experiments": ["certify"]
    })
}

fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == name)
        .unwrap();
    rdr.records().map(|r| r.unwrap()[idx].to_string()).collect()
}

#[test]
fn scalar_sweep_reproduces_closed_form_and_crossing() {
    let dir = tempfile::tempdir().unwrap();
    let grid = vec![0.5, 1.5, 1.9, 2.1, 2.5];
    assert_eq!(
        run_in(dir.path(), &scalar_config(grid.clone()), "sweep"),
        EXIT_OK
    );
    let lambdas = csv_column(&dir.path().join("out/sweep.csv"), "lambda");
    for (eta, lam) in grid.iter().zip(&lambdas) {
        let got: f64 = lam.parse().unwrap();
        assert!(
            (got - (1.0 - eta).abs().ln()).abs() < 1e-12,
            "eta {eta}: {got}"
        );
    }
    let doc: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/sweep.json")).unwrap())
            .unwrap();
    let crossings = doc["table"]["crossings"].as_array().unwrap();
    assert_eq!(crossings.len(), 1);
    let est = crossings[0]["eta_estimate"].as_f64().unwrap();
    assert!((est - 2.0).abs() < 0.01, "crossing at {est}");
    assert!(doc["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn outputs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = scalar_config(vec![0.3, 1.2]);
    assert_eq!(run_in(a.path(), &cfg, "sweep"), EXIT_OK);
    assert_eq!(run_in(b.path(), &cfg, "sweep"), EXIT_OK);
    for name in ["sweep.csv", "sweep.json"] {
        assert_eq!(
            fs::read(a.path().join("out").join(name)).unwrap(),
            fs::read(b.path().join("out").join(name)).unwrap()
        );
    }
}

#[test]
fn empty_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run_in(dir.path(), &scalar_config(vec![]), "sweep"),
        EXIT_CONFIG
    );
}

#[test]
fn unknown_fields_and_unselected_experiments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = scalar_config(vec![0.5]);
    cfg["bogus"] = json!(1);
    assert_eq!(run_in(dir.path(), &cfg, "sweep"), EXIT_CONFIG);
    assert_eq!(
        run_in(dir.path(), &scalar_config(vec![0.5]), "analyze"),
        EXIT_CONFIG
    );
}

#[test]
fn certify_rejects_unsupported_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "task": { "kind": "linear", "param_dim": 8, "sample_count": 5, "seed": 1 },
        "eta": 0.5,
        "experiments": ["certify"]
    });
    assert_eq!(run_in(dir.path(), &cfg, "certify"), EXIT_PRECONDITION);
}

#[test]
fn certify_reports_missing_certificate_when_stable() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &coupled_config(0.3), "certify"), EXIT_OK);
    let doc: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/certificate.json")).unwrap())
            .unwrap();
    assert_eq!(doc["result"]["status"], "no-certificate");
    assert_eq!(doc["precondition_lambda_positive"], false);
}

#[test]
fn certify_succeeds_in_the_unstable_regime() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &coupled_config(1.3), "certify"), EXIT_OK);
    let doc: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/certificate.json")).unwrap())
            .unwrap();
    assert_eq!(doc["result"]["status"], "certified");
    assert!(doc["result"]["certificate"]["gamma"].as_f64().unwrap() < 1.0);
    assert!((doc["r_at_zero"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!(dir.path().join("out/r_curve.csv").exists());
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_sgd-stability");
    let status = Command::new(exe).arg("sweep").status().unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));
    let status = Command::new(exe).arg("--help").output().unwrap().status;
    assert_eq!(status.code(), Some(EXIT_OK));
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &scalar_config(vec![0.5]));
    let status = Command::new(exe)
        .args(["sweep", "--config", &config, "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));
}
