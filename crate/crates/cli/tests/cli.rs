//! Exit codes and output layout of the `bellman` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bellman(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bellman")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bellman-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).lines().next().unwrap_or("").to_string()
}

#[test]
fn simulate_and_filter_layout() {
    let dir = scratch("layout");
    let data = dir.join("y.csv");
    let out = bellman(&["simulate", "--model", "poisson", "--n", "50", "--out", s(&data)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,y,alpha");
    assert_eq!(text.lines().count(), 51);

    let f = bellman(&["filter", "--model", "poisson", "--data", s(&data)]);
    assert!(f.status.success());
    assert_eq!(header(&f), "t,a_pred,a_upd,i_pred,i_upd,iterations,converged,loglik_term");

    let p = bellman(&["filter", "--model", "poisson", "--data", s(&data), "--filter", "csir", "--particles", "50"]);
    assert!(p.status.success());
    assert_eq!(header(&p), "t,pred_mean,pred_median,filt_mean,filt_median,ess");

    let dep = dir.join("dep.csv");
    assert!(bellman(&["simulate", "--model", "dep-t", "--n", "20", "--out", s(&dep)]).status.success());
    let text = std::fs::read_to_string(&dep).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,y1,y2,alpha");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn estimate_reports_json() {
    let dir = scratch("estimate");
    let data = dir.join("y.csv");
    assert!(bellman(&["simulate", "--model", "gamma", "--n", "400", "--seed", "2", "--out", s(&data)])
        .status
        .success());
    let out = bellman(&["estimate", "--model", "gamma", "--data", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["params"]["T"].as_f64().unwrap().abs() < 1.0);
    assert!(v["objective"].as_f64().unwrap().is_finite());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = scratch("config");
    assert_eq!(bellman(&["simulate", "--model", "no-such-model"]).status.code(), Some(2));
    assert_eq!(bellman(&["filter", "--model", "poisson", "--data", "/no/such/file.csv"]).status.code(), Some(2));

    let params = dir.join("p.toml");
    std::fs::write(&params, "T = 1.5\n").unwrap();
    assert_eq!(bellman(&["simulate", "--model", "poisson", "--params", s(&params)]).status.code(), Some(2));
    std::fs::write(&params, "typo = 1.0\n").unwrap();
    assert_eq!(bellman(&["simulate", "--model", "poisson", "--params", s(&params)]).status.code(), Some(2));

    let long = dir.join("long.csv");
    assert!(bellman(&["simulate", "--model", "poisson", "--n", "300", "--out", s(&long)]).status.success());
    assert_eq!(bellman(&["mode-oracle", "--model", "poisson", "--data", s(&long)]).status.code(), Some(2));

    let cfg = dir.join("study.toml");
    std::fs::write(&cfg, "model = \"poisson\"\nlength = 101\n").unwrap();
    assert_eq!(bellman(&["study", "--config", s(&cfg)]).status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = scratch("numerical");
    let data = dir.join("y.csv");
    let rows: String = (0..20).map(|t| format!("{t},1e200,1e200\n")).collect();
    std::fs::write(&data, format!("t,y1,y2\n{rows}")).unwrap();
    let out = bellman(&["filter", "--model", "dep-gauss", "--data", s(&data), "--filter", "csir", "--particles", "50"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn study_writes_report_and_series() {
    let dir = scratch("study");
    let cfg = dir.join("study.toml");
    let report = dir.join("report.json");
    let series = dir.join("series.csv");
    std::fs::write(
        &cfg,
        format!(
            "model = \"exponential\"\nn_series = 2\nlength = 200\nmethods = [\"bellman\", \"mode\"]\nmode_window = 40\n\
             [output]\nseries_csv = \"{}\"\n",
            s(&series)
        ),
    )
    .unwrap();
    let out = bellman(&["study", "--config", s(&cfg), "--out", s(&report), "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["n_series"], 2);
    assert_eq!(v["methods"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(&series).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "series,method,mae,rmse,error");
    assert_eq!(csv.lines().count(), 5);
    let _ = std::fs::remove_dir_all(&dir);
}
