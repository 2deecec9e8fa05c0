//! End-to-end checks of the command-line interface and its exit codes.

use std::path::Path;
use std::process::Command;

fn mlsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mlsim"))
}

fn run_args(out: &Path, extra: &[&str]) -> Command {
    let mut cmd = mlsim();
    cmd.args([
        "run", "--kernel", "cg", "--procs", "16", "--iters", "20", "--cp-int", "10",
        "--log-size", "10", "--mode", "local", "--size", "256",
    ]);
    cmd.args(["--out", out.to_str().unwrap()]);
    cmd.args(extra);
    cmd
}

#[test]
fn run_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let status = run_args(&out, &["--fail", "2:13:2"]).status().unwrap();
    assert!(status.success());
    for f in ["config.json", "metrics.csv", "trace.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    for rank in 0..16 {
        assert!(out.join(format!("ckpt/ckpt_cg_{rank}.bin")).exists());
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(1).unwrap();
    assert!(row.contains(",local,"), "row: {row}");
}

#[test]
fn verify_accepts_fault_free_vs_recovered_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run_args(&a, &[]).status().unwrap().success());
    assert!(run_args(&b, &["--fail", "2:13:2"]).status().unwrap().success());
    let out = mlsim()
        .args(["verify", a.to_str().unwrap(), b.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn verify_rejects_different_seeds_as_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run_args(&a, &[]).status().unwrap().success());
    assert!(run_args(&b, &["--seed", "2"]).status().unwrap().success());
    let status = mlsim()
        .args(["verify", a.to_str().unwrap(), b.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn verify_detects_differing_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(run_args(&a, &[]).status().unwrap().success());
    assert!(run_args(&b, &[]).status().unwrap().success());
    // Tamper with one metric value.
    let path = b.join("metrics.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replace(
        text.lines().nth(1).unwrap().rsplit(',').next().unwrap(),
        "0000000000000000",
    );
    std::fs::write(&path, tampered).unwrap();
    let status = mlsim()
        .args(["verify", a.to_str().unwrap(), b.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));
}

#[test]
fn invalid_config_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    // mode=local with log_size != cp_int violates validation.
    let status = mlsim()
        .args([
            "run", "--kernel", "cg", "--procs", "16", "--iters", "20", "--cp-int", "10",
            "--log-size", "5", "--mode", "local", "--size", "256", "--out",
            tmp.path().join("x").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // Failure iteration beyond the run is a config error too.
    let status = run_args(&tmp.path().join("y"), &["--fail", "2:99:0"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn sweep_emits_deterministic_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for sub in ["s1", "s2"] {
        let out = tmp.path().join(sub);
        let status = mlsim()
            .args([
                "sweep", "--kernel", "cg", "--procs", "16", "--iters", "30", "--cp-int", "12",
                "--log-size", "6", "--mode", "hybrid", "--size", "256", "--fail-rank", "2",
                "--fail-iters", "13..=20", "--fail-phases", "0..=4", "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        csvs.push(std::fs::read(out.join("sweep.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1], "sweep CSV bytes differ between runs");
    let text = String::from_utf8(csvs.pop().unwrap()).unwrap();
    assert_eq!(text.lines().count(), 1 + 8 * 5);
    assert!(text.lines().any(|l| l.contains(",local,")));
    assert!(text.lines().any(|l| l.contains(",global,")));
}

#[test]
fn config_file_round_trips_through_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"kernel":"stencil","procs":8,"iters":12,"seed":7,"cp_int":5,"log_size":5,
            "mode":"local","failures":[{"rank":1,"iter":8,"phase":1}],"size":4}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let status = mlsim()
        .args([
            "run",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["kernel"], "stencil");
    assert_eq!(saved["seed"], 7);
    assert_eq!(saved["failures"][0]["iter"], 8);
}
