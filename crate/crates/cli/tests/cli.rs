use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "model": {"layers": 2, "heads": 2, "dim": 16, "mlp_ratio": 2},
  "train": {"max_steps": 6, "batch_size": 4, "eval_interval": 3, "log_interval": 1,
            "val_episodes_per_task": 1, "val_max_steps": 8, "frozen_blocks": 0},
  "data": {"val_fraction": 0.5},
  "eval": {"episodes_per_task": 2, "max_steps": 8}
}"#;

fn vla(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vla"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("REFINEVLA_TEACHER_ENDPOINT")
        .env_remove("REFINEVLA_TEACHER_TOKEN")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let o = vla(args, dir);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Generated and annotated data (2 episodes per task) plus the tiny config.
fn workspace() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(&["gen-data", "--episodes", "2", "--seed", "5", "--out", "demos"], d);
    ok(&["annotate", "--in", "demos", "--teacher", "oracle", "--out", "data"], d);
    tmp
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&read(path)).unwrap()
}

// ── gen-data / annotate ──────────────────────────────────────────────────

#[test]
fn gen_data_with_one_episode_covers_every_task_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(&["gen-data", "--episodes", "1", "--out", "a"], d);
    ok(&["gen-data", "--episodes", "1", "--out", "b"], d);
    let manifest = json(d.join("a/demos.manifest.json"));
    assert_eq!(manifest["episodes"], 4);
    assert_eq!(manifest["counts_per_task"].as_object().unwrap().len(), 4);
    for f in ["demos.manifest.json", "demos.records.jsonl", "vocab.json"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f} differs");
    }
    assert_eq!(json(d.join("a/config.json"))["data"]["episodes_per_task"], 1);
}

#[test]
fn zero_episodes_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = vla(&["gen-data", "--episodes", "0", "--out", "x"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_task_and_unknown_config_key_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&vla(&["gen-data", "--tasks", "fork_to_cup", "--out", "x"], d)), 2);
    std::fs::write(d.join("bad.json"), r#"{"train": {"lambda": 0.3}}"#).unwrap();
    assert_eq!(code(&vla(&["gen-data", "--config", "bad.json", "--out", "x"], d)), 2);
}

#[test]
fn oracle_annotation_keeps_every_record() {
    let tmp = workspace();
    let d = tmp.path();
    let demos = json(d.join("demos/demos.manifest.json"));
    let annotated = json(d.join("data/annotated.manifest.json"));
    assert_eq!(demos["total_steps"], annotated["total_steps"]);
    assert_eq!(annotated["annotated"], true);
    let lines = String::from_utf8(read(d.join("data/annotated.records.jsonl"))).unwrap();
    assert_eq!(lines.lines().count() as u64, demos["total_steps"].as_u64().unwrap());
    assert!(lines.lines().all(|l| l.contains("\"rationale_ids\":[")));
}

#[test]
fn unreachable_remote_teacher_exits_4_with_a_manifest_of_every_index() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(&["gen-data", "--episodes", "1", "--out", "demos"], d);
    let o = vla(
        &["annotate", "--in", "demos", "--teacher", "remote", "--endpoint", "http://127.0.0.1:1", "--retries", "1", "--out", "r"],
        d,
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let total = json(d.join("demos/demos.manifest.json"))["total_steps"].as_u64().unwrap();
    let failures = json(d.join("r/failures.json"));
    let failed: Vec<u64> = failures["failed"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(failed, (0..total).collect::<Vec<_>>());
    assert!(!d.join("r/annotated.records.jsonl").exists());
}

#[test]
fn remote_teacher_without_endpoint_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(&["gen-data", "--episodes", "1", "--out", "demos"], d);
    assert_eq!(code(&vla(&["annotate", "--in", "demos", "--teacher", "remote", "--out", "r"], d)), 2);
}

// ── train ────────────────────────────────────────────────────────────────

#[test]
fn train_writes_the_documented_layout_and_reruns_byte_identically() {
    let tmp = workspace();
    let d = tmp.path();
    ok(&["train", "--config", "tiny.json", "--data", "data", "--out", "t1"], d);
    for f in ["config.json", "metrics.csv", "checkpoints/init.ckpt", "checkpoints/best.ckpt", "checkpoints/final.ckpt", "reports/train_summary.json"] {
        assert!(d.join("t1").join(f).exists(), "missing {f}");
    }
    ok(&["train", "--config", "t1/config.json", "--out", "t2"], d);
    assert_eq!(read(d.join("t1/metrics.csv")), read(d.join("t2/metrics.csv")));
    assert_eq!(read(d.join("t1/checkpoints/final.ckpt")), read(d.join("t2/checkpoints/final.ckpt")));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = workspace();
    let d = tmp.path();
    ok(&["train", "--config", "tiny.json", "--data", "data", "--steps", "2", "--lambda-r", "0.7", "--out", "t"], d);
    let c = json(d.join("t/config.json"));
    assert_eq!(c["train"]["max_steps"], 2);
    assert_eq!(c["train"]["lambda_r"], 0.7);
    assert_eq!(c["train"]["batch_size"], 4);
    assert_eq!(c["model"]["dim"], 16);
}

#[test]
fn zero_lambda_reproduces_the_action_only_baseline() {
    let tmp = workspace();
    let d = tmp.path();
    ok(&["train", "--config", "tiny.json", "--data", "data", "--lambda-r", "0", "--out", "zero"], d);
    ok(&["train", "--config", "tiny.json", "--data", "data", "--action-only", "--out", "base"], d);
    assert_eq!(read(d.join("zero/metrics.csv")), read(d.join("base/metrics.csv")));
    assert_eq!(read(d.join("zero/checkpoints/final.ckpt")).len(), read(d.join("base/checkpoints/final.ckpt")).len());
    let params = |p: &str| {
        let b = read(d.join(p));
        b[b.len() - 4 * 1000..].to_vec()
    };
    assert_eq!(params("zero/checkpoints/final.ckpt"), params("base/checkpoints/final.ckpt"));
}

#[test]
fn divergence_exits_5() {
    let tmp = workspace();
    let d = tmp.path();
    let o = vla(&["train", "--config", "tiny.json", "--data", "data", "--lr", "1e300", "--out", "t"], d);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("t/metrics.csv").exists());
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    assert_eq!(code(&vla(&["train", "--config", "tiny.json", "--data", "nowhere", "--out", "t"], d)), 3);
    assert_eq!(code(&vla(&["train", "--config", "tiny.json", "--out", "t"], d)), 2);
}

// ── sweeps ───────────────────────────────────────────────────────────────

#[test]
fn lambda_sweep_emits_curves_and_is_deterministic() {
    let tmp = workspace();
    let d = tmp.path();
    let args = |out: &'static str| {
        ["sweep-lambda", "--config", "tiny.json", "--data", "data", "--values", "0,0.3,1", "--jobs", "2", "--out", out]
    };
    ok(&args("s1"), d);
    ok(&args("s2"), d);
    let svg = String::from_utf8(read(d.join("s1/reports/sweep_lambda_r.svg"))).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches("class=\"marker\"").count(), 3);
    let points = json(d.join("s1/reports/sweep_lambda_r.json"));
    assert_eq!(points.as_array().unwrap().len(), 3);
    assert_eq!(read(d.join("s1/metrics.csv")), read(d.join("s2/metrics.csv")));
    for v in ["0", "0.3", "1"] {
        let p = format!("runs/lambda_r_{v}/metrics.csv");
        assert_eq!(read(d.join("s1").join(&p)), read(d.join("s2").join(&p)), "{p}");
    }
}

#[test]
fn freeze_sweep_covers_every_depth_and_records_invalid_values() {
    let tmp = workspace();
    let d = tmp.path();
    ok(&["sweep-freeze", "--config", "tiny.json", "--data", "data", "--values", "0,1,2,3", "--out", "s"], d);
    let runs = json(d.join("s/reports/sweep_frozen_blocks_runs.json"));
    let runs = runs["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 4);
    assert!(runs[..3].iter().all(|r| r["error"].is_null()));
    assert!(runs[3]["error"].is_string());
    assert!(runs[2]["note"].as_str().unwrap().contains("head-only"));
    assert!(d.join("s/reports/sweep_frozen_blocks.svg").exists());
}

// ── eval / viz ───────────────────────────────────────────────────────────

#[test]
fn eval_reports_expert_and_random_tables() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let o = ok(&["eval", "--policy", "expert", "--episodes", "5", "--out", "e"], d);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("visual_matching,average,1,1,20"), "{table}");
    assert!(d.join("e/reports/success_visual_matching.csv").exists());
    assert_eq!(String::from_utf8(read(d.join("e/reports/episodes.jsonl"))).unwrap().lines().count(), 20);
    ok(&["eval", "--policy", "random", "--episodes", "5", "--modes", "visual_matching,variant_aggregation", "--out", "r"], d);
    assert!(d.join("r/reports/success_variant_aggregation.csv").exists());
}

#[test]
fn eval_needs_a_policy_and_a_readable_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&vla(&["eval", "--out", "e"], d)), 2);
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&vla(&["eval", "--checkpoint", "junk.ckpt", "--out", "e"], d)), 3);
}

#[test]
fn viz_attn_emits_paired_heatmaps_and_an_alignment_report() {
    let tmp = workspace();
    let d = tmp.path();
    ok(&["train", "--config", "tiny.json", "--data", "data", "--out", "t"], d);
    ok(
        &["viz-attn", "--config", "tiny.json", "--before", "t/checkpoints/init.ckpt", "--after", "t/checkpoints/final.ckpt", "--heatmaps", "1", "--out", "v"],
        d,
    );
    let report = json(d.join("v/reports/alignment.json"));
    assert_eq!(report["episodes"].as_array().unwrap().len(), 8);
    let delta = report["mean_after"].as_f64().unwrap() - report["mean_before"].as_f64().unwrap();
    assert!((report["mean_delta"].as_f64().unwrap() - delta).abs() < 1e-12);
    let files: Vec<String> = std::fs::read_dir(d.join("v/heatmaps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(files.len(), 4 * 2 * 2);
    for f in files.iter().filter(|f| f.ends_with("_before.json")) {
        let after = f.replace("_before", "_after");
        assert!(files.contains(&after), "{f} has no partner");
        let (b, a) = (json(d.join("v/heatmaps").join(f)), json(d.join("v/heatmaps").join(&after)));
        assert_eq!(b["metadata"]["scene_hash"], a["metadata"]["scene_hash"]);
    }
}
