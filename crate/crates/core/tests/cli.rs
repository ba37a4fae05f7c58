use std::path::Path;
use std::process::{Command, Output};

use argus_gate::pipeline::Manifest;

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_argus-gate"))
        .args(args)
        .env("ARGUS_GATE_OUT", root)
        .output()
        .expect("spawn argus-gate")
}

fn small(root: &Path) -> String {
    let cfg = root.join("small.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nseed = 3\ngen.episodes = 6\ntrain.epochs = 1\nsim.episodes = 6\n\
         features.dim = 4\nfeatures.tokens = 1,2,1,1\n",
    )
    .unwrap();
    cfg.display().to_string()
}

#[test]
fn gen_with_zero_episodes_warns_and_writes_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen", "--set", "gen.episodes=0"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let traces = std::fs::read(dir.path().join("gen/traces.jsonl")).unwrap();
    assert!(traces.is_empty());
    let m = Manifest::read(&dir.path().join("gen/manifest.json")).unwrap();
    assert_eq!(m.warnings.len(), 1);
    assert_eq!(m.config["gen.episodes"], "0");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["gen", "--set", "no.such.key=1"],
        vec!["gen", "--set", "policy.quality=7"],
        vec!["gen", "--set", "missing-equals"],
        vec!["label"],
    ] {
        let out = run(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn malformed_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"episode_id\": 1}\n").unwrap();
    let set = format!("paths.traces={}", bad.display());
    let out = run(dir.path(), &["label", "--set", &set]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl"));
}

#[test]
fn runaway_learning_rate_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    assert!(run(dir.path(), &["gen", "--config", &cfg]).status.success());
    let traces = format!(
        "paths.traces={}",
        dir.path().join("gen/traces.jsonl").display()
    );
    assert!(
        run(dir.path(), &["label", "--config", &cfg, "--set", &traces])
            .status
            .success()
    );
    let samples = format!(
        "paths.samples={}",
        dir.path().join("label/samples.jsonl").display()
    );
    let out = run(
        dir.path(),
        &[
            "train",
            "--config",
            &cfg,
            "--set",
            &samples,
            "--set",
            "train.lr=1e250",
            "--set",
            "train.epochs=3",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn replay_rejects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    assert!(run(dir.path(), &["gen", "--config", &cfg]).status.success());
    let traces_path = dir.path().join("gen/traces.jsonl");
    let traces = format!("paths.traces={}", traces_path.display());
    assert!(
        run(dir.path(), &["label", "--config", &cfg, "--set", &traces])
            .status
            .success()
    );
    let manifest = dir.path().join("label/manifest.json");
    let m = manifest.display().to_string();
    assert!(run(dir.path(), &["replay", "--manifest", &m])
        .status
        .success());
    std::fs::write(&traces_path, "").unwrap();
    let out = run(dir.path(), &["replay", "--manifest", &m]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_writes_summary_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let out = run(
        dir.path(),
        &[
            "simulate",
            "--config",
            &cfg,
            "--set",
            "sim.scorer=oracle",
            "--out",
            "sim",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = std::fs::read_to_string(dir.path().join("sim/summary.csv")).unwrap();
    let header = summary.lines().next().unwrap();
    assert_eq!(
        header,
        "suite,success_rate,avg_steps,avg_attempts,avg_decision_ms"
    );
    let decisions = std::fs::read_to_string(dir.path().join("sim/decisions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(decisions.lines().next().unwrap()).unwrap();
    assert_eq!(first["episode"], 0);
    assert!(first["outcome"].is_string());
}
