//! CLI behavior: exit codes, config-file handling, and output routing.

use std::process::{Command, Output};

fn run(dir: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sicmdp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn CLI")
}

#[test]
fn missing_env_file_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["solve-exact", "--env", "nope.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kind=io"), "stderr: {err}");
}

#[test]
fn malformed_env_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.json"), "{\"num_states\": 0}").unwrap();
    let out = run(tmp.path(), &["solve-exact", "--env", "bad.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn conflicting_sampling_modes_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = run(tmp.path(), &["gen-env", "--seed", "1", "--out", "env.json"]);
    assert!(gen.status.success());
    let out = run(
        tmp.path(),
        &[
            "sample-data", "--env", "env.json", "--n-per-pair", "5", "--m", "10", "--out",
            "d.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("run.cfg"),
        "# defaults for this experiment\nseed=1\nstates=6\n",
    )
    .unwrap();
    let from_cfg = run(
        tmp.path(),
        &["--config", "run.cfg", "gen-env", "--out", "a.json"],
    );
    assert!(from_cfg.status.success(), "{}", String::from_utf8_lossy(&from_cfg.stderr));
    let overridden = run(
        tmp.path(),
        &["--config", "run.cfg", "gen-env", "--seed", "2", "--out", "b.json"],
    );
    assert!(overridden.status.success());
    let a: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("a.json")).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(a["num_states"], 6);
    assert_eq!(b["num_states"], 6); // still from the config file
    assert_ne!(a["reward"], b["reward"]); // seed came from the flag
}

#[test]
fn stdout_is_used_without_out_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["gen-env", "--seed", "4"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["num_states"], 8);
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for args in [
        vec!["gen-env", "--seed", "11", "--out", "env.json"],
        vec![
            "sample-data", "--env", "env.json", "--seed", "1", "--n-per-pair", "50", "--out",
            "data.json",
        ],
        vec![
            "sicrl", "--env", "env.json", "--data", "data.json", "--T", "16", "--seed", "1",
            "--out", "trace.csv", "--policy-out", "policy.json",
        ],
        vec![
            "eval", "--env", "env.json", "--policy", "policy.json", "--grid", "400", "--out",
            "eval.csv",
        ],
    ] {
        let out = run(dir, &args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iter,elapsed_ms,active_constraints,lp_objective,violation"));
    let eval = std::fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert!(eval.starts_with("reference_value,policy_value,error_term,sup_violation"));
}
