//! End-to-end tests of the `mira` binary: exit codes, artifacts, and
//! run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_mira");

const CONFIG: &str = r#"
[env]
family = "chain"
pages = 5
branching = 2
subgoals = 2
horizon = 20
seed = 3

[hparams]
phases = 2
rollouts_per_phase = 4
train_tasks = 2
warmup_steps = 50
critic_iters = 2
actor_steps = 5
seed = 11

[run]
pool_size = 4
"#;

fn mira(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary launches")
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_into(config: &Path, run_dir: &Path) -> Output {
    mira(&[
        "train",
        "--config",
        path_str(config),
        "--run-dir",
        path_str(run_dir),
    ])
}

#[test]
fn train_writes_phase_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = train_into(&config, &run_dir);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in [
        "resolved_config.toml",
        "manifest.json",
        "checkpoint_0.json",
        "trajectories_0.jsonl",
        "summary_0.json",
        "checkpoint_1.json",
        "summary_1.json",
    ] {
        assert!(run_dir.join(name).exists(), "missing artifact {name}");
    }
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary_1.json")).unwrap())
            .unwrap();
    assert_eq!(summary["phase"], 1);
    assert!(summary["success_rate"].is_number());
}

#[test]
fn train_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    assert!(train_into(&config, &run_a).status.success());
    assert!(train_into(&config, &run_b).status.success());
    for name in [
        "manifest.json",
        "summary_0.json",
        "summary_1.json",
        "checkpoint_1.json",
        "trajectories_1.jsonl",
    ] {
        let a = std::fs::read(run_a.join(name)).unwrap();
        let b = std::fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn rollout_writes_expected_count_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    assert!(train_into(&config, &run_dir).status.success());
    let checkpoint = run_dir.join("checkpoint_1.json");
    let log_a = dir.path().join("a.jsonl");
    let log_b = dir.path().join("b.jsonl");
    for log in [&log_a, &log_b] {
        let out = mira(&[
            "rollout",
            "--config",
            path_str(&config),
            "--checkpoint",
            path_str(&checkpoint),
            "--n",
            "2",
            "--seed",
            "5",
            "--out",
            path_str(log),
        ]);
        assert!(
            out.status.success(),
            "rollout failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let text = std::fs::read_to_string(&log_a).unwrap();
    // pool_size 4 tasks x 2 episodes each.
    assert_eq!(text.lines().count(), 8);
    assert_eq!(
        std::fs::read(&log_a).unwrap(),
        std::fs::read(&log_b).unwrap()
    );
}

#[test]
fn rollout_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    assert!(train_into(&config, &run_dir).status.success());
    // A config with a different page count changes the feature dimension.
    let other = dir.path().join("other.toml");
    std::fs::write(&other, CONFIG.replace("pages = 5", "pages = 7")).unwrap();
    let out = mira(&[
        "rollout",
        "--config",
        path_str(&other),
        "--checkpoint",
        path_str(&run_dir.join("checkpoint_1.json")),
        "--out",
        path_str(&dir.path().join("x.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not match"));
}

fn fixture_log(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/failure_corpus.jsonl"
    );
    let mut log_lines = String::new();
    let mut goals = serde_json::Map::new();
    for line in std::fs::read_to_string(corpus).unwrap().lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Value = serde_json::from_str(line).unwrap();
        let traj = &record["trajectory"];
        if let Some(goal) = record["goal_page"].as_u64() {
            goals.insert(
                traj["task_id"].as_str().unwrap().to_string(),
                Value::from(goal),
            );
        }
        log_lines.push_str(&serde_json::to_string(traj).unwrap());
        log_lines.push('\n');
    }
    let log = dir.join("failures.jsonl");
    let goals_path = dir.join("goals.json");
    std::fs::write(&log, log_lines).unwrap();
    std::fs::write(&goals_path, serde_json::to_string(&Value::Object(goals)).unwrap()).unwrap();
    (log, goals_path)
}

#[test]
fn analyze_reports_all_four_categories() {
    let dir = tempfile::tempdir().unwrap();
    let (log, goals) = fixture_log(dir.path());
    let report = dir.path().join("report.json");
    let records = dir.path().join("records.jsonl");
    let csv = dir.path().join("report.csv");
    let out = mira(&[
        "analyze",
        "--log",
        path_str(&log),
        "--goals",
        path_str(&goals),
        "--report",
        path_str(&report),
        "--records",
        path_str(&records),
        "--csv",
        path_str(&csv),
    ]);
    assert!(
        out.status.success(),
        "analyze failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["total_traces"], 44);
    assert_eq!(report["failures"], 44);
    let dist = report["distribution"].as_object().unwrap();
    for category in ["wrong_termination", "stuck_midway", "fail_attempt", "others"] {
        assert_eq!(dist[category]["count"], 11, "bad count for {category}");
    }
    assert_eq!(
        std::fs::read_to_string(&records).unwrap().lines().count(),
        44
    );
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("category,count,ratio"));
    assert_eq!(csv_text.lines().count(), 5);
    // Summaries go to stderr for human review.
    assert!(String::from_utf8_lossy(&out.stderr).contains("Final benchmark check: FAILED"));
}

#[test]
fn analyze_empty_log_succeeds_with_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.jsonl");
    std::fs::write(&log, "").unwrap();
    let out = mira(&["analyze", "--log", path_str(&log)]);
    assert!(out.status.success());
    let report: Value = serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(report["total_traces"], 0);
    assert_eq!(report["failures"], 0);
}

#[test]
fn analyze_corrupt_log_exits_2_and_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let (log, _) = fixture_log(dir.path());
    let mut text = std::fs::read_to_string(&log).unwrap();
    let first = text.lines().next().unwrap().to_string();
    text = format!("{first}\nnot json\n");
    std::fs::write(&log, text).unwrap();
    let out = mira(&["analyze", "--log", path_str(&log)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn eval_computes_metrics_on_mixed_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    assert!(train_into(&config, &run_dir).status.success());
    // The phase logs contain successes and failures from real rollouts.
    let mut combined = String::new();
    for phase in 0..2 {
        combined.push_str(
            &std::fs::read_to_string(run_dir.join(format!("trajectories_{phase}.jsonl")))
                .unwrap(),
        );
    }
    let log = dir.path().join("eval.jsonl");
    std::fs::write(&log, combined).unwrap();
    let out_path = dir.path().join("metrics.json");
    let csv_dir = dir.path().join("csv");
    let out = mira(&[
        "eval",
        "--log",
        path_str(&log),
        "--out",
        path_str(&out_path),
        "--csv-dir",
        path_str(&csv_dir),
        "--k",
        "1,2",
    ]);
    assert!(
        out.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert!(report["traces"].as_u64().unwrap() > 0);
    let pass = report["pass_at_k"].as_object().unwrap();
    for k in ["1", "2"] {
        let v = pass[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(csv_dir.join("calibration.csv").exists());
}

#[test]
fn eval_empty_log_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("empty.jsonl");
    std::fs::write(&log, "").unwrap();
    let out = mira(&["eval", "--log", path_str(&log)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn report_aggregates_phase_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    assert!(train_into(&config, &run_dir).status.success());
    let csv = dir.path().join("phases.csv");
    let out = mira(&[
        "report",
        "--run-dir",
        path_str(&run_dir),
        "--csv",
        path_str(&csv),
    ]);
    assert!(out.status.success());
    let report: Value = serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(report["phase_count"], 2);
    assert!(report["final_success_rate"].is_number());
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, CONFIG.replace("seed = 11", "gamma = 1.5")).unwrap();
    let out = mira(&[
        "train",
        "--config",
        path_str(&bad),
        "--run-dir",
        path_str(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
}

#[test]
fn train_ablation_flags_change_the_frozen_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("run");
    let out = mira(&[
        "train",
        "--config",
        path_str(&config),
        "--run-dir",
        path_str(&run_dir),
        "--no-potential-critic",
        "--lambda",
        "1.0",
        "--alpha",
        "0.0",
        "--phases",
        "1",
    ]);
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let frozen = std::fs::read_to_string(run_dir.join("resolved_config.toml")).unwrap();
    assert!(frozen.contains("use_potential_critic = false"));
    assert!(frozen.contains("lambda = 1.0"));
    assert!(frozen.contains("phases = 1"));
    assert!(!run_dir.join("summary_1.json").exists());
}
