//! End-to-end checks of the command-line interface: exit codes, output
//! formats, and determinism across runs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn topforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topforge"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_dataset(dir: &Path, name: &str, n: u32, count: u32) {
    let out = topforge(
        dir,
        &[
            "gen", "--n", &n.to_string(), "--m", "2", "--tmax", "2", "--count",
            &count.to_string(), "--seed", "7", "--out", name,
        ],
    );
    assert_success(&out);
}

#[test]
fn gen_is_deterministic_and_reports_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), "a.jsonl", 6, 40);
    gen_dataset(dir.path(), "b.jsonl", 6, 40);
    let a = fs::read(dir.path().join("a.jsonl")).unwrap();
    let b = fs::read(dir.path().join("b.jsonl")).unwrap();
    assert_eq!(a, b, "same flags must give byte-identical files");
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 40);
}

#[test]
fn usage_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = topforge(
        dir.path(),
        &["gen", "--n", "0", "--m", "2", "--tmax", "2", "--count", "5", "--out", "x.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    let out = topforge(dir.path(), &["gen", "--n", "5", "--m", "2", "--tmax", "2", "--count", "0", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let out = topforge(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = topforge(dir.path(), &["eval", "--dataset", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
}

#[test]
fn eval_emits_well_formed_csv_with_dominant_oracle() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), "d.jsonl", 6, 30);
    let out = topforge(
        dir.path(),
        &["eval", "--dataset", "d.jsonl", "--seed", "3", "--out", "r.csv"],
    );
    assert_success(&out);
    let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "solver,n,m,tmax,prize_scheme,mean_reward,mean_nodes,p50_ms,p95_ms"
    );
    let mut rewards = std::collections::HashMap::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 9, "row: {line}");
        assert_eq!(fields[1], "6");
        assert_eq!(fields[2], "2");
        assert_eq!(fields[3], "2");
        assert_eq!(fields[4], "constant");
        let reward: f64 = fields[5].parse().unwrap();
        let nodes: f64 = fields[6].parse().unwrap();
        assert_eq!(reward, nodes, "constant prizes make reward equal visit count");
        rewards.insert(fields[0].to_string(), reward);
    }
    let oracle = rewards["oracle"];
    assert!(oracle >= rewards["greedy"]);
    assert!(oracle >= rewards["random"]);
}

#[test]
fn eval_reward_fields_are_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), "d.jsonl", 6, 25);
    let strip_timing = |text: &str| {
        text.lines()
            .map(|l| l.split(',').take(7).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let run = || {
        let out = topforge(
            dir.path(),
            &["eval", "--dataset", "d.jsonl", "--seed", "9", "--workers", "4", "--out", "r.csv"],
        );
        assert_success(&out);
        strip_timing(&fs::read_to_string(dir.path().join("r.csv")).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn thread_cap_env_var_is_respected() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), "d.jsonl", 5, 10);
    let out = Command::new(env!("CARGO_BIN_EXE_topforge"))
        .args(["eval", "--dataset", "d.jsonl", "--out", "r.csv"])
        .env("TOPFORGE_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_success(&out);
}

#[test]
fn solve_prints_a_solution_dump() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), "d.jsonl", 6, 1);
    let line = fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    fs::write(dir.path().join("one.json"), line.lines().next().unwrap()).unwrap();
    let out = topforge(
        dir.path(),
        &["solve", "--instance", "one.json", "--solver", "oracle"],
    );
    assert_success(&out);
    let dump: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is one JSON object");
    assert!(dump["routes"].is_array());
    assert!(dump["reward"].is_number());
    assert_eq!(dump["routes"].as_array().unwrap().len(), 2);
    assert_eq!(dump["duration_per_agent"].as_array().unwrap().len(), 2);
    assert_eq!(dump["t_max"], 2.0);
}

const SMOKE_CONFIG: &str = r#"
batch_size = 16
instances_per_epoch = 32
epochs = 2
learning_rate = 0.001
checkpoint_every = 1
validation_size = 8
grad_clip = 1.0

[net]
hidden_dim = 8
num_blocks = 1
num_heads = 2
logit_clip = 10.0
encoder_norm = "batch"

[gen]
n = 4
m = 2
t_max = 2.0
prize_scheme = "uniform"
single_depot = true
seed = 5
"#;

#[test]
fn train_writes_checkpoint_and_stats_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.toml"), SMOKE_CONFIG).unwrap();
    let out = topforge(
        dir.path(),
        &["train", "--config", "train.toml", "--checkpoint", "model.topf", "--stats", "s.csv"],
    );
    assert_success(&out);
    assert!(dir.path().join("model.topf").exists());
    let stats = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(stats.lines().count(), 3, "header plus two epochs");

    // extend the run: raise the epoch budget in the sidecar, then resume
    let sidecar_path = dir.path().join("model.topf.json");
    let sidecar = fs::read_to_string(&sidecar_path).unwrap();
    fs::write(&sidecar_path, sidecar.replace("\"epochs\": 2", "\"epochs\": 4")).unwrap();
    let out = topforge(
        dir.path(),
        &["train", "--resume", "--checkpoint", "model.topf", "--stats", "s.csv"],
    );
    assert_success(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("resuming from epoch 2"));
    let stats = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let epochs: Vec<&str> =
        stats.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, vec!["0", "1", "2", "3"], "resume continues epoch numbering");
}

#[test]
fn invalid_net_config_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMOKE_CONFIG.replace("hidden_dim = 8", "hidden_dim = 9");
    fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = topforge(
        dir.path(),
        &["train", "--config", "bad.toml", "--checkpoint", "m.topf", "--stats", "s.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("m.topf").exists());
    assert!(!dir.path().join("s.csv").exists());
}

#[test]
fn eval_includes_the_transformer_row_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.toml"), SMOKE_CONFIG).unwrap();
    let out = topforge(
        dir.path(),
        &["train", "--config", "train.toml", "--checkpoint", "model.topf", "--stats", "s.csv"],
    );
    assert_success(&out);
    gen_dataset(dir.path(), "d.jsonl", 4, 10);
    let out = topforge(
        dir.path(),
        &["eval", "--dataset", "d.jsonl", "--checkpoint", "model.topf", "--out", "r.csv"],
    );
    assert_success(&out);
    let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let solvers: Vec<&str> =
        text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(solvers, vec!["transformer", "greedy", "random", "oracle"]);
}

#[test]
fn bench_reports_monotone_latency_over_scales() {
    let dir = tempfile::tempdir().unwrap();
    let out = topforge(dir.path(), &["bench", "--count", "3", "--seed", "1", "--out", "b.csv"]);
    assert_success(&out);
    let text = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "config,n,m,batch,instances,mean_ms,p50_ms,p95_ms");
    let mean_for = |label: &str| {
        text.lines()
            .find(|l| l.starts_with(label) && l.split(',').nth(3) == Some("1"))
            .and_then(|l| l.split(',').nth(5))
            .unwrap()
            .parse::<f64>()
            .unwrap()
    };
    let small = mean_for("small");
    let large = mean_for("large");
    assert!(small < large, "per-instance latency must grow with scale: {small} vs {large}");
}
