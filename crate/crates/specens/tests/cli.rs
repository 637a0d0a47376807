//! End-to-end tests of the `specens` binary: exit-code contract, output
//! determinism, and report plumbing.

use std::path::Path;
use std::process::{Command, Output};

fn specens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specens"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn gen_table(dir: &Path, seed: &str, cost: &str) -> String {
    let out = dir
        .join(format!("m{seed}.json"))
        .to_string_lossy()
        .into_owned();
    let output = specens(&[
        "gen-model", "--kind", "table", "--seed", seed, "--vocab", "8",
        "--context", "1", "--cost", cost, "--out", &out,
    ]);
    assert!(output.status.success(), "{output:?}");
    out
}

#[test]
fn gen_model_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_table(dir.path(), "7", "0.5");
    let b_path = dir.path().join("again.json");
    let b = b_path.to_string_lossy().into_owned();
    let output = specens(&[
        "gen-model", "--kind", "table", "--seed", "7", "--vocab", "8",
        "--context", "1", "--cost", "0.5", "--out", &b,
    ]);
    assert!(output.status.success());
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "same seed must produce identical model files"
    );
}

#[test]
fn decode_is_deterministic_and_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let q = gen_table(dir.path(), "1", "0.2");
    let p = gen_table(dir.path(), "2", "1.0");
    let trace_path = dir.path().join("trace.json");
    let trace = trace_path.to_string_lossy().into_owned();
    let run = || {
        specens(&[
            "decode", "--strategy", "spec-ensemble", "--models",
            &format!("{q},{p}"), "--lambda", "0.5", "--gammas", "2,1",
            "--max-tokens", "16", "--seed", "9", "--prefix", "0,1",
            "--trace", &trace,
        ])
    };
    let first = run();
    assert!(first.status.success(), "{first:?}");
    let tokens = String::from_utf8(first.stdout).unwrap();
    assert_eq!(tokens.split_whitespace().count(), 16);
    let second = run();
    assert_eq!(tokens, String::from_utf8(second.stdout).unwrap());
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&trace_path).unwrap()).unwrap();
    assert_eq!(trace["tokens"].as_array().unwrap().len(), 16);
    assert!(trace["steps"].as_array().unwrap().len() > 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let q = gen_table(dir.path(), "3", "0.2");
    let p = gen_table(dir.path(), "4", "1.0");

    // Degenerate vocabulary.
    let out_path = dir.path().join("bad.json").to_string_lossy().into_owned();
    let output = specens(&[
        "gen-model", "--kind", "table", "--seed", "1", "--vocab", "1",
        "--context", "1", "--out", &out_path,
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");

    // N-model scheme needs at least two models.
    let output = specens(&[
        "decode", "--strategy", "nmodel-se", "--models", &q,
        "--gammas", "1", "--max-tokens", "8",
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");

    // --mu belongs to the contrastive ensemble, not the weighted one.
    let output = specens(&[
        "decode", "--strategy", "spec-ensemble", "--models",
        &format!("{q},{p}"), "--ensemble", "weighted", "--mu", "0.1",
        "--gammas", "2,1", "--max-tokens", "8",
    ]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");

    // Formula arguments out of range.
    let output = specens(&["formulas", "--alpha", "1.5", "--gamma", "2", "--c", "0.5"]);
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn io_errors_exit_3() {
    let output = specens(&[
        "decode", "--strategy", "spec-ensemble", "--models",
        "/nonexistent/q.json,/nonexistent/p.json", "--gammas", "2,1",
    ]);
    assert_eq!(output.status.code(), Some(3), "{output:?}");
}

#[test]
fn failed_validation_exits_1() {
    // A tolerance below the Monte Carlo noise floor cannot be met, so the
    // suite runs to completion with a failing verdict.
    let output = specens(&[
        "validate", "--suite", "distribution", "--sessions", "30000",
        "--tolerance", "0.001", "--seed", "5",
    ]);
    assert_eq!(output.status.code(), Some(1), "{output:?}");
    let verdict: serde_json::Value =
        serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(verdict["pass"], false);

    // Too few sessions for the stratified gate is a runtime error, not a
    // verdict.
    let output = specens(&[
        "validate", "--suite", "distribution", "--sessions", "200", "--seed", "5",
    ]);
    assert_eq!(output.status.code(), Some(3), "{output:?}");
}

#[test]
fn experiment_writes_expected_report_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "models": [
            {"kind": "table", "seed": 11, "vocab_size": 8, "context_length": 1, "cost": 0.2},
            {"kind": "table", "seed": 12, "vocab_size": 8, "context_length": 1, "cost": 1.0},
        ],
        "ensemble": {"kind": "weighted", "lambda": 0.5, "temperature": 1.0},
        "strategies": [
            {"strategy": "spec-ensemble", "gammas": [2, 1]},
            {"strategy": "alternate-proposal", "gammas": [2, 1]},
        ],
        "sweep": {"parameter": "gamma", "values": [1.0, 2.0, 3.0]},
        "sessions": 50,
        "tokens_per_session": 32,
        "seed": 77,
    });
    let config_path = dir.path().join("exp.json");
    std::fs::write(&config_path, serde_json::to_vec(&config).unwrap()).unwrap();
    let output = specens(&[
        "experiment",
        "--config", &config_path.to_string_lossy(),
        "--out-dir", &dir.path().to_string_lossy(),
        "--format", "both",
    ]);
    assert!(output.status.success(), "{output:?}");
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    // Header plus (baseline + 2 strategy arms) per sweep value.
    assert_eq!(csv.lines().count(), 1 + 3 * 3, "{csv}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 9);
    assert_eq!(json["seed"], 77);
    // Baselines report speedup exactly 1.
    assert_eq!(json["cells"][0]["speedup"], 1.0);
}
