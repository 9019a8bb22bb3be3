//! End-to-end runs of the `fbsvie-lab` binary.

use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsvie-lab"))
        .arg("run")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("FBSVIE_THREADS", "1")
        .output()
        .unwrap()
}

fn base(task: &str, model: &str) -> String {
    format!("task = \"{task}\"\nn_paths = 500\nseed = 3\n\n[model]\nname = \"{model}\"\n\n[grid]\nt_max = 1.0\nn_steps = 20\nbeta = 12.0\n")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (headers, rows)
}

#[test]
fn zero_model_backward_solution_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "zero.toml", &base("solve-bsvie", "zero"));
    let out = dir.path().join("out");
    let res = run(&cfg, &out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (headers, rows) = read_csv(&out.join("bsvie.csv"));
    assert_eq!(headers, ["t", "mean_Y", "sd_Y"]);
    for row in &rows {
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    }
    let (_, iters) = read_csv(&out.join("bsvie_iterations.csv"));
    assert_eq!(iters.len(), 1);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 3);
    let status: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(status["status"], "ok");
}

#[test]
fn contraction_check_reports_small_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{}\n[diagnostics]\nprobes = 20\n", base("verify-contraction", "exp_generator")));
    let out = dir.path().join("out");
    let res = run(&cfg, &out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (headers, rows) = read_csv(&out.join("contraction.csv"));
    let col = headers.iter().position(|h| h == "squared_ratio").unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r[col].parse::<f64>().unwrap() <= 0.6));
}

#[test]
fn lq_benchmark_emits_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{}\n[optimizer]\niters = 2\n", base("lq-benchmark", "lq"));
    let cfg = write_config(dir.path(), "lq.toml", &body);
    let out = dir.path().join("out");
    let res = run(&cfg, &out, &["--paths", "300"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (headers, rows) = read_csv(&out.join("lq_benchmark.csv"));
    assert_eq!(headers, ["metric", "value"]);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    for m in ["policy_error_pct", "J_error_pct", "stationarity_ratio", "oracle_value", "optimized_J"] {
        assert!(names.contains(&m), "missing {m} in {names:?}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_paths"], 300);
    assert!(out.join("policy.csv").exists() && out.join("optimizer.csv").exists());
}

#[test]
fn invalid_config_exits_with_two_and_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad_grid = write_config(dir.path(), "g.toml", &base("simulate-forward", "sdde").replace("n_steps = 20", "n_steps = -4"));
    let unknown = write_config(dir.path(), "u.toml", &format!("{}bogus = 1\n", base("simulate-forward", "sdde")));
    let no_model = write_config(dir.path(), "m.toml", &base("simulate-forward", "nonexistent"));
    for cfg in [bad_grid, unknown, no_model] {
        let res = run(&cfg, &out, &[]);
        assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
        let err: Value = serde_json::from_slice(&res.stderr).unwrap();
        assert_eq!(err["error"]["exit_code"], 2);
        assert!(err["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn missing_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&dir.path().join("absent.toml"), &dir.path().join("out"), &[]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "f.toml", &base("simulate-forward", "sdde"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &["--seed", "4"]).status.success());
    assert_ne!(std::fs::read(a.join("forward.csv")).unwrap(), std::fs::read(b.join("forward.csv")).unwrap());
}
