use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const CHAIN: &str = r#"{"n":3,"M":[[0.8,0.2,0.0],[0.2,0.2,0.9],[0.0,0.6,0.1]],"convention":"column-stochastic"}"#;
const SAFE: &str = r#"{"G":[[1,0,0],[0,1,0],[0,0,1]],"g":[0.6,0.5,0.5],"on_simplex":true}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safechain"))
        .current_dir(dir)
        .arg("--out")
        .arg("out")
        .args(args)
        .output()
        .expect("binary runs")
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("chain.json"), CHAIN).unwrap();
    std::fs::write(dir.path().join("safe.json"), SAFE).unwrap();
    std::fs::write(dir.path().join("inside.json"), "[0.5,0.5,0.0]").unwrap();
    std::fs::write(dir.path().join("outside.json"), "[0.1,0.4,0.5]").unwrap();
    dir
}

fn artifact(dir: &Path, name: &str) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("out").join(name)).unwrap()).unwrap()
}

#[test]
fn invariant_set_then_membership() {
    let dir = workspace();
    let p = dir.path();
    let out = run(p, &["invariant-set", "--chain", "chain.json", "--safe", "safe.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let env = artifact(p, "invariant_set.json");
    assert_eq!(env["tool"], "safechain");
    assert_eq!(env["command"], "invariant-set");
    assert_eq!(env["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(env["tolerances"]["lp_feasibility"].as_f64(), Some(1e-8));
    assert_eq!(env["result"]["status"]["kind"], "converged");
    assert_eq!(env["result"]["status"]["t_star"], 1);
    let csv = std::fs::read_to_string(p.join("out/invariant_history.csv")).unwrap();
    assert!(csv.starts_with("t,rows,verdict\n"));

    let inside = run(p, &["membership", "--result", "out/invariant_set.json", "--x0", "inside.json"]);
    assert_eq!(inside.status.code(), Some(0));
    assert_eq!(artifact(p, "membership.json")["result"]["member"], true);

    let outside = run(p, &["membership", "--result", "out/invariant_set.json", "--x0", "outside.json"]);
    assert_eq!(outside.status.code(), Some(1));
    let m = artifact(p, "membership.json");
    assert_eq!(m["result"]["member"], false);
    assert_eq!(m["result"]["first_violation"], serde_json::json!([1, 1]));
}

#[test]
fn certify_reports_both_verdicts() {
    let dir = workspace();
    let p = dir.path();
    let out = run(p, &["certify", "--chain", "chain.json", "--set", "safe.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(artifact(p, "certify.json")["result"]["verdict"], "not-invariant");

    // The simplex itself is invariant under any chain.
    std::fs::write(p.join("simplex.json"), r#"{"G":[[-1,0,0]],"g":[0],"on_simplex":true}"#).unwrap();
    let out = run(p, &["certify", "--chain", "chain.json", "--set", "simplex.json"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(artifact(p, "certify.json")["result"]["verdict"], "invariant");
}

#[test]
fn row_stochastic_needs_transpose() {
    let dir = workspace();
    let p = dir.path();
    let rows = r#"{"n":3,"M":[[0.8,0.2,0.0],[0.2,0.2,0.6],[0.0,0.9,0.1]],"convention":"row-stochastic"}"#;
    std::fs::write(p.join("rows.json"), rows).unwrap();
    let out = run(p, &["check-chain", "--chain", "rows.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--transpose"));

    let out = run(p, &["--transpose", "check-chain", "--chain", "rows.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rho = artifact(p, "check_chain.json")["result"]["rho"].as_f64().unwrap();
    assert!((rho - 0.7).abs() < 1e-12);
}

#[test]
fn malformed_input_exits_two() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("bad.json"), r#"{"n":2,"M":[[0.5,0.5],[0.6,0.5]],"convention":"column-stochastic"}"#).unwrap();
    let out = run(p, &["check-chain", "--chain", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));

    let out = run(p, &["check-chain", "--chain", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn artifacts_are_deterministic() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("graph.json"), "[[1,1,0],[1,1,1],[0,1,1]]").unwrap();
    let args = ["--seed", "7", "synthesize", "--graph", "graph.json"];
    assert_eq!(run(p, &args).status.code(), Some(0));
    let first = std::fs::read(p.join("out/synthesis.json")).unwrap();
    assert_eq!(run(p, &args).status.code(), Some(0));
    let second = std::fs::read(p.join("out/synthesis.json")).unwrap();
    assert_eq!(first, second);

    let env: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(env["result"]["strategy"], "reversible");
    assert!(env["result"]["lambda_star"].as_f64().unwrap() < 1.0);

    // A different tolerance changes the configuration hash.
    let other = run(p, &["--lambda-tol", "1e-3", "synthesize", "--graph", "graph.json"]);
    assert_eq!(other.status.code(), Some(0));
    let env2 = artifact(p, "synthesis.json");
    assert_ne!(env["config_hash"], env2["config_hash"]);
}

#[test]
fn simulate_writes_histogram() {
    let dir = workspace();
    let p = dir.path();
    let out = run(p, &["simulate", "--chain", "chain.json", "--x0", "uniform", "--agents", "1000", "--horizon", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(p.join("out/histogram.csv")).unwrap();
    let total: u64 = csv
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("0,"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 1000);
}
