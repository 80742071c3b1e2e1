use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pdtool(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pdtool"));
    cmd.args(args).env_remove("PDTOOL_THREADS");
    if let Some(t) = threads {
        cmd.env("PDTOOL_THREADS", t);
    }
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    pdtool(&args, None)
}

fn saddle_cfg(method: Value, budget: usize) -> Value {
    json!({
        "kind": "saddle",
        "name": "s",
        "saddle": {
            "problem": { "random": { "dims": [3, 2, 2], "m": 2, "rho": 1.0 } },
            "solver": method,
            "budget": budget,
            "tol": 1e-9
        }
    })
}

fn meta(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("s.meta.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_declared_header_and_meta() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &saddle_cfg(json!({ "method": "alm" }), 500));
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("s.csv")).unwrap();
    let m = meta(&out);
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let declared: Vec<&str> = m["traces"][0]["columns"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert_eq!(header, declared);
    assert_eq!(m["traces"][0]["rows"].as_u64().unwrap() as usize, csv.lines().count() - 1);
    assert_eq!(m["kind"], "saddle");
    assert_eq!(m["extras"]["converged"], true);
    assert!(m["flags"].as_array().unwrap().is_empty());
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn malformed_config_exits_1_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ \"kind\": \"saddle\", ").unwrap();
    assert_eq!(code(&run(&bad, &out, &[])), 1);
    let mut unknown = saddle_cfg(json!({ "method": "alm" }), 10);
    unknown["saddle"]["budgett"] = json!(5);
    let unknown = write_config(tmp.path(), "unknown.json", &unknown);
    assert_eq!(code(&run(&unknown, &out, &[])), 1);
    assert_eq!(code(&run(&tmp.path().join("missing.json"), &out, &[])), 1);
    assert!(!out.exists());
}

#[test]
fn semantic_error_exits_1_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = saddle_cfg(json!({ "method": "pdmm", "blocks_per_iter": 9, "eta": 0.5 }), 10);
    let cfg = write_config(tmp.path(), "c.json", &cfg);
    let o = run(&cfg, &out, &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    assert!(!out.exists());

    let admm = write_config(tmp.path(), "admm.json", &saddle_cfg(json!({ "method": "admm" }), 10));
    assert_eq!(code(&run(&admm, &out, &[])), 1);
    assert!(!out.exists());
}

#[test]
fn flagged_run_exits_2_and_still_writes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "c.json", &saddle_cfg(json!({ "method": "ahu", "alpha": 1e-4 }), 20));
    let o = run(&cfg, &out, &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("flag:"));
    assert!(!meta(&out)["flags"].as_array().unwrap().is_empty());
}

#[test]
fn zero_budget_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "c.json", &saddle_cfg(json!({ "method": "alm" }), 0));
    assert_eq!(code(&run(&cfg, &out, &[])), 0);
    let csv = fs::read_to_string(out.join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert_eq!(meta(&out)["traces"][0]["rows"], 0);
}

#[test]
fn seed_controls_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = saddle_cfg(json!({ "method": "alm" }), 50);
    base["saddle"]["problem"]["random"]["dims"] = json!([3, 2]);
    let cfg = write_config(tmp.path(), "c.json", &base);
    let dirs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(format!("o{i}"))).collect();
    assert_eq!(code(&run(&cfg, &dirs[0], &[])), 0);
    assert_eq!(code(&run(&cfg, &dirs[1], &[])), 0);
    assert_eq!(code(&run(&cfg, &dirs[2], &["--seed", "7"])), 0);
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&dirs[0], "s.csv"), read(&dirs[1], "s.csv"));
    assert_eq!(read(&dirs[0], "s.meta.json"), read(&dirs[1], "s.meta.json"));
    assert_ne!(read(&dirs[0], "s.csv"), read(&dirs[2], "s.csv"));
    assert_ne!(meta(&dirs[0])["config_sha256"], meta(&dirs[2])["config_sha256"]);
    assert_eq!(meta(&dirs[2])["seed"], 7);
}

#[test]
fn output_location_does_not_change_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = saddle_cfg(json!({ "method": "alm" }), 500);
    base["saddle"]["problem"]["random"]["dims"] = json!([2, 2]);
    base["output"] = json!("rel");
    let cfg = write_config(tmp.path(), "c.json", &base);
    let o = pdtool(&["run", cfg.to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    let relative = meta(&tmp.path().join("rel"));
    let other = tmp.path().join("elsewhere");
    assert_eq!(code(&run(&cfg, &other, &[])), 0);
    assert_eq!(relative["config_sha256"], meta(&other)["config_sha256"]);
}

#[test]
fn invalid_thread_count_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "c.json", &saddle_cfg(json!({ "method": "alm" }), 5));
    for bad in ["0", "many", "-3"] {
        let o = pdtool(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(bad));
        assert_eq!(code(&o), 1, "PDTOOL_THREADS={bad}");
        assert_eq!(code(&pdtool(&["check", "--filter", "graph"], Some(bad))), 1);
    }
    assert!(!out.exists());
    assert_eq!(code(&pdtool(&["check", "--filter", "graph"], Some("2"))), 0);
}

#[test]
fn schema_prints_json() {
    let o = pdtool(&["schema"], None);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["$schema"], "https://json-schema.org/draft/2020-12/schema");
}

#[test]
fn check_filters_and_arguments() {
    let o = pdtool(&["check", "--filter", "graph"], None);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).all(|l| l.contains("graph::")));
    assert!(stdout.lines().last().unwrap().ends_with("0 failed"));
    assert_eq!(code(&pdtool(&["check", "--filter", "nonsense"], None)), 1);
    assert_eq!(code(&pdtool(&["frobnicate"], None)), 1);
    assert_eq!(code(&pdtool(&["run"], None)), 1);
    assert_eq!(code(&pdtool(&["run", "x.json", "--seed", "minus"], None)), 1);
    assert_eq!(code(&pdtool(&["--help"], None)), 0);
}
