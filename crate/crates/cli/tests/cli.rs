use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use shvit::rng::Rng;
use tempfile::TempDir;

fn shvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shvit"))
        .args(args)
        .output()
        .expect("spawn shvit")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid json")
}

fn create_tiny(dir: &Path) -> String {
    let w = dir.join("tiny.shvw");
    let out = shvit(&["create", "--config", "tiny", "--seed", "3", "--out", w.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    w.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(shvit(&[]).status.code(), Some(2));
    assert_eq!(shvit(&["bogus"]).status.code(), Some(2));
    assert_eq!(shvit(&["bench"]).status.code(), Some(2));
    assert_eq!(shvit(&["cost", "--config", "ref", "--res", "abc"]).status.code(), Some(2));
}

#[test]
fn operational_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.shvw");
    let out = shvit(&["bench", "--weights", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let garbage = dir.path().join("garbage.shvw");
    std::fs::write(&garbage, b"not a weight file at all").unwrap();
    let out = shvit(&["profile", "--weights", garbage.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = shvit(&["cost", "--config", "no-such-builtin"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cost_totals_sum_the_layers() {
    let v = json(&shvit(&["cost", "--config", "ref", "--json"]));
    assert_eq!(v["report_version"], 1);
    let layers = v["layers"].as_array().unwrap();
    for key in ["params", "macs", "mem_access"] {
        let sum: u64 = layers.iter().map(|l| l[key].as_u64().unwrap()).sum();
        assert_eq!(sum, v[format!("total_{key}")].as_u64().unwrap(), "{key}");
    }
    // MACs scale with the batch, parameters do not.
    let v2 = json(&shvit(&["cost", "--config", "ref", "--batch", "2", "--json"]));
    assert_eq!(v2["total_params"], v["total_params"]);
    assert_eq!(v2["total_macs"].as_u64().unwrap(), 2 * v["total_macs"].as_u64().unwrap());
}

#[test]
fn compare_macro_reports_both_sides() {
    let v = json(&shvit(&["compare-macro", "--config-a", "ref", "--config-b", "four-stage", "--json"]));
    assert!(v["a"]["total_macs"].as_u64().unwrap() < v["b"]["total_macs"].as_u64().unwrap());
    assert!(v["a"]["total_mem_access"].as_u64().unwrap() < v["b"]["total_mem_access"].as_u64().unwrap());
}

#[test]
fn bench_json_parses() {
    let dir = TempDir::new().unwrap();
    let w = create_tiny(dir.path());
    let v = json(&shvit(&["bench", "--weights", &w, "--batch", "2", "--iters", "3", "--single-thread", "--json"]));
    assert_eq!(v["report_version"], 1);
    assert!(v["images_per_sec"].as_f64().unwrap() > 0.0);
    assert_eq!(v["iter_s"].as_array().unwrap().len(), 3);
    assert_eq!(v["single_thread"], true);
}

#[test]
fn profile_json_and_fusion() {
    let dir = TempDir::new().unwrap();
    let w = create_tiny(dir.path());
    let plain = json(&shvit(&["profile", "--weights", &w, "--batch", "2", "--json"]));
    let fused = json(&shvit(&["profile", "--weights", &w, "--batch", "2", "--fuse", "--json"]));
    let has_bn = |v: &Value| v["entries"].as_array().unwrap().iter().any(|e| e["op"] == "batch_norm");
    assert!(has_bn(&plain));
    assert!(!has_bn(&fused));
    assert_eq!(fused["fused"], true);
}

#[test]
fn classify_reads_a_tensor_file() {
    let dir = TempDir::new().unwrap();
    let w = create_tiny(dir.path());
    let x = Rng::new(5).normal_tensor(&[3, 3, 32, 32], 1.0);
    let input = dir.path().join("x.tensor");
    shvit::io::save_tensor(&x, &input).unwrap();
    let v = json(&shvit(&["classify", "--weights", &w, "--input", input.to_str().unwrap(), "--json"]));
    let classes = v["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 3);
    assert!(classes.iter().all(|c| c.as_u64().unwrap() < 4));
}

#[test]
fn train_toy_writes_weights_and_curve() {
    let dir = TempDir::new().unwrap();
    let w = dir.path().join("t.shvw");
    let curve = dir.path().join("curve.csv");
    let out = shvit(&[
        "train-toy",
        "--config",
        "tiny",
        "--steps",
        "12",
        "--seed",
        "1",
        "--out",
        w.to_str().unwrap(),
        "--curve",
        curve.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&curve).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,lr,loss,eval_acc"));
    assert_eq!(lines.count(), 12);
    assert!(shvit::io::load_model(&w).is_ok());
}

#[test]
fn analyze_rejects_single_head_layers() {
    let dir = TempDir::new().unwrap();
    let w = create_tiny(dir.path());
    let out = shvit(&["analyze", "heads", "--weights", &w, "--layer", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("single-head"));
    let out = shvit(&["analyze", "heads", "--weights", &w, "--layer", "9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_multi_head_layer() {
    let dir = TempDir::new().unwrap();
    let mut cfg = shvit::model::ModelConfig::tiny();
    cfg.stages[1].mhsa_heads = Some(2);
    let cfg_path = dir.path().join("mh.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let w = dir.path().join("mh.shvw");
    let out = shvit(&["create", "--config", cfg_path.to_str().unwrap(), "--out", w.to_str().unwrap()]);
    assert!(out.status.success());
    let w = w.to_str().unwrap();

    let sim = json(&shvit(&["analyze", "heads", "--weights", w, "--layer", "0", "--samples", "8", "--json"]));
    assert_eq!(sim["heads"], 2);
    assert_eq!(sim["report_version"], 1);

    let sweep = json(&shvit(&[
        "analyze", "heads", "--weights", w, "--layer", "0", "--sweep", "one-hot", "--samples", "8", "--json",
    ]));
    assert_eq!(sweep["entries"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_primitives_pass() {
    let out = shvit(&["gradcheck", "--seeds", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let out = shvit(&["gradcheck", "--seeds", "1", "--tol", "1e-30", "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report_version"], 1);
    assert!((v["tol"].as_f64().unwrap() / 1e-30 - 1.0).abs() < 1e-12);
}
