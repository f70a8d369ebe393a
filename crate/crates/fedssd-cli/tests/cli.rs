//! Integration tests for the `fedssd` command line: manifest contents, the
//! comparison and inspection subcommands, flag precedence, and exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn fedssd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedssd"))
}

fn run_small(out_root: &Path, out_name: &str, extra: &[&str]) {
    let mut args = vec![
        "run",
        "--preset",
        "toy-default",
        "--rounds",
        "4",
        "--seed",
        "1",
        "--out",
        out_name,
    ];
    args.extend_from_slice(extra);
    let status = fedssd()
        .args(&args)
        .env("FEDSSD_OUT_ROOT", out_root)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn manifest_lists_every_artifact_with_hashes() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "run", &[]);
    let dir = root.path().join("run");
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["artifacts"].as_array().unwrap();
    // One CSV, one JSON, one checkpoint for the single seed.
    assert_eq!(entries.len(), 3);
    for entry in entries {
        let file = entry["file"].as_str().unwrap();
        let hash = entry["sha256"].as_str().unwrap();
        assert!(dir.join(file).exists(), "manifest names missing file {file}");
        assert_eq!(hash.len(), 64);
    }
    assert!(manifest["failed_seeds"].as_array().unwrap().is_empty());
}

#[test]
fn compare_ranks_runs_and_needs_two_directories() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "base", &[]);
    run_small(root.path(), "other", &["--algo", "ssd", "--m-max", "0.1"]);
    let output = fedssd()
        .arg("compare")
        .arg(root.path().join("base"))
        .arg(root.path().join("other"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("final_acc") && text.contains("rounds_to_target"));
    assert!(text.lines().count() >= 3, "expected a header plus one row per run");

    let status = fedssd()
        .arg("compare")
        .arg(root.path().join("base"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2), "compare with one directory should fail");
}

#[test]
fn inspect_prints_config_and_final_metrics() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "run", &["--algo", "ssd"]);
    let output = fedssd()
        .arg("inspect")
        .arg(root.path().join("run"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("final acc_global"));
    assert!(text.contains("credibility matrix"), "ssd runs should report the matrix");
}

#[test]
fn flags_override_config_values() {
    let root = tempfile::tempdir().unwrap();
    run_small(root.path(), "run", &[]);
    let doc: Value = serde_json::from_str(
        &fs::read_to_string(root.path().join("run").join("results_seed1.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(doc["config"]["experiment"]["rounds"], 4);
    assert_eq!(doc["rounds"].as_array().unwrap().len(), 4);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "[federation]\nclients = 4\nwarp_factor = 9\n").unwrap();
    let output = fedssd().args(["run", "--config"]).arg(&path).output().unwrap();
    assert_eq!(output.code_or_panic(), 1);
    let err = String::from_utf8(output.stderr).unwrap();
    assert!(err.contains("warp_factor"), "error should name the offending key: {err}");
}

trait CodeOrPanic {
    fn code_or_panic(&self) -> i32;
}

impl CodeOrPanic for std::process::Output {
    fn code_or_panic(&self) -> i32 {
        self.status.code().expect("process terminated by signal")
    }
}
