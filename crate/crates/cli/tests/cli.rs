use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anchorstream"));
    c.env_remove("ANCHORSTREAM_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

// small enough to pretrain in a second or two
fn tiny(extra: Value) -> Value {
    let mut v = json!({
        "stream": {"k_segments": 2, "per_segment": 40, "general_train": 300, "general_dev": 40, "target_dev": 40},
        "pretrain": {"min_epochs": 1, "max_epochs": 3, "wer_threshold": 100.0},
        "train": {"batch_size": 16, "epochs_per_segment": 1}
    });
    merge(&mut v, extra);
    v
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn write_cfg(dir: &Path, v: &Value) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, serde_json::to_string(v).unwrap()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn pipeline_gen_pretrain_adapt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &tiny(json!({})));
    let d = dir.path().to_str().unwrap();

    let o = run(&["gen-data", "--config", &cfg, "--seed", "3", "--out", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stream = dir.path().join("stream.jsonl");
    assert!(stream.exists());

    let o = run(&["pretrain", "--config", &cfg, "--seed", "3", "--data", stream.to_str().unwrap(), "--out", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    let base = dir.path().join("base.json");
    assert!(base.exists() && dir.path().join("pretrain.json").exists());

    let out = dir.path().join("v51");
    let o = run(&[
        "adapt",
        "--preset",
        "V5.1",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--data",
        stream.to_str().unwrap(),
        "--checkpoint",
        base.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--save-state",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("segments.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
    let written: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["preset"], "V5.1");
    for seg in ["segment-01", "segment-02"] {
        for f in ["adapters.json", "fisher.json", "buffer.json"] {
            assert!(out.join("checkpoints").join(seg).join(f).exists(), "{seg}/{f}");
        }
    }
}

#[test]
fn seed_env_matches_flag_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &tiny(json!({})));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&["adapt", "--preset", "V3.1", "--config", &cfg, "--seed", "11", "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = bin()
        .env("ANCHORSTREAM_SEED", "11")
        .args(["adapt", "--preset", "V3.1", "--config", &cfg, "--out", b.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("segments.csv")).unwrap(), fs::read(b.join("segments.csv")).unwrap());
}

#[test]
fn compare_writes_pareto_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &tiny(json!({})));
    let o = run(&["compare", "--presets", "V1.1,V4.5", "--config", &cfg, "--seed", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("pareto.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(dir.path().join("V1.1").join("segments.csv").exists());
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&["adapt", "--checkpoint", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint not found"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_preset_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &json!({"train": {"learning_rate": 1.0}}));
    let o = run(&["adapt", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = run(&["adapt", "--preset", "V9.9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("V3.1"), "{}", stderr(&o));

    let o = run(&["adapt", "--segments", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pretrain_convergence_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &tiny(json!({"pretrain": {"max_epochs": 1, "min_epochs": 1, "wer_threshold": 0.0}})));
    let o = run(&["pretrain", "--config", &cfg, "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergent_adaptation_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &tiny(json!({"train": {"lr": 1e200, "warmup_steps": 0}})));
    let o = run(&["adapt", "--preset", "V1.1", "--config", &cfg, "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn validate_passes() {
    let o = run(&["validate", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{out}");
}
