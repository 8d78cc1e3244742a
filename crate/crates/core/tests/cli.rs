mod common;

use common::*;
use serde_json::Value;

#[test]
fn full_pipeline_runs_from_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let outputs = run_small_pipeline(dir.path());
    let get = |name: &str| -> &[u8] { &outputs.iter().find(|(n, _)| n == name).unwrap().1 };

    let est: Value = serde_json::from_slice(get("estimate")).unwrap();
    assert_eq!(est["K"], 20);
    assert_eq!(est["layers"].as_array().unwrap().len(), 3);
    assert_eq!(est["layers"][0]["probe_vals"].as_array().unwrap().len(), 20);

    let oracle: Value = serde_json::from_slice(get("oracle")).unwrap();
    assert_eq!(oracle["compare"]["methods_agree"], true);
    assert!(dir.path().join("h.bin").exists());

    let cal: Value = serde_json::from_slice(get("calibrate")).unwrap();
    assert_eq!(cal["members"], 4);
    assert!(cal["h"].as_f64().unwrap() > 0.0);

    let table: Value = serde_json::from_slice(&std::fs::read(dir.path().join("detect.json")).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 8);
    let sweep: Value = serde_json::from_slice(&std::fs::read(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn errors_exit_nonzero_with_a_json_message() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("model.txt"), "input = 2\nlayer = dense 2 cosine\n").unwrap();
    let out = layertrace(dir.path(), &["init-params", "--model", "model.txt", "--out", "p.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("cosine"));

    let out = layertrace(dir.path(), &["calibrate", "--runs", "nothing/*", "--out", "cal"]);
    assert_eq!(out.status.code(), Some(1));

    let out = layertrace(dir.path(), &["estimate", "--model", "missing.txt", "--params", "p", "--batch", "b"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));
}

#[test]
fn mismatched_params_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("model.txt"), "input = 2\nlayer = dense 2 tanh\n").unwrap();
    std::fs::write(dir.path().join("p.json"), "[1.0, 2.0]").unwrap();
    std::fs::write(dir.path().join("b.json"), r#"{"inputs": [[0.0, 1.0]], "classes": [1]}"#).unwrap();
    let out = layertrace(dir.path(), &["estimate", "--model", "model.txt", "--params", "p.json", "--batch", "b.json"]);
    assert_eq!(out.status.code(), Some(1));
}
