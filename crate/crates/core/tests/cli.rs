use std::process::{Command, Output};

use vitconv::checkpoint::load_checkpoint;
use vitconv::harness::Dataset;
use vitconv::quant::QuantizedGraph;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitconv"))
        .args(args)
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["verify", "--help"]), 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["verify", "--a", "nonsense"]), 2);
    assert_eq!(code(&["calibrate", "--method", "entropy"]), 2);
    assert_eq!(code(&["transform", "--config", "giant"]), 2);
    assert_eq!(code(&["dataset"]), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    assert_eq!(
        code(&["transform", "--checkpoint", "/nonexistent/model.dckp"]),
        1
    );
}

#[test]
fn verify_exit_code_follows_report() {
    let ok = run(&["verify", "--inputs", "4", "--json"]);
    assert_eq!(ok.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(r["pass"], true);
    assert_eq!(r["samples"], 4);

    let bad = run(&[
        "verify", "--a", "original", "--b", "zero", "--inputs", "4", "--json",
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let r: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(r["pass"], false);

    // int8 against fp32 misses the rewrite tolerances
    let q = run(&[
        "verify",
        "--b",
        "int8",
        "--inputs",
        "4",
        "--calib-samples",
        "10",
        "--json",
    ]);
    let r: serde_json::Value = serde_json::from_slice(&q.stdout).unwrap();
    assert_eq!(q.status.code(), Some(if r["pass"] == true { 0 } else { 1 }));
}

#[test]
fn artifacts_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        &["transform", "--out", out][..],
        &["quantize", "--calib-samples", "10", "--out", out],
        &["dataset", "--per-class", "2", "--out", out],
    ] {
        assert_eq!(code(args), 0, "{args:?}");
    }
    let lowered = load_checkpoint(dir.path().join("lowered.dckp")).unwrap();
    assert!(lowered.contains("blk0.ln1.mean1.w"));
    let qg = QuantizedGraph::load(dir.path().join("quantized")).unwrap();
    assert!(qg.graph.count_kind("Quantize") >= 1);
    let ds = Dataset::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(ds.len(), 10);
}

#[test]
fn calibrate_from_saved_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        code(&["dataset", "--per-class", "2", "--seed", "3", "--out", out]),
        0
    );
    let manifest = dir.path().join("manifest.json");
    let m = manifest.to_str().unwrap();
    assert_eq!(code(&["calibrate", "--calib-dataset", m, "--out", out]), 0);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("calib.json")).unwrap())
            .unwrap();
    assert_eq!(stats["samples"], 10);
}

#[test]
fn eval_prints_accuracy_table() {
    let o = run(&["eval", "--per-class", "2", "--calib-samples", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with('|')), "{text}");
}
