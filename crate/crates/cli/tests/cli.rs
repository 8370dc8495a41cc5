use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparse-routing"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{"schema_version": 1, "train": {"steps": 120, "eval_interval": 40}}"#;

#[test]
fn missing_config_exits_2_with_path() {
    let out = run(&["train", "--config", "/nonexistent/cfg.json", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/cfg.json"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"schema_version": 1, "trian": {}}"#);
    let out = run(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"schema_version": 1, "train": {"steps": 20, "lr": 1e200}}"#);
    let out = run(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 1"));
}

#[test]
fn minimal_config_writes_outputs_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let out = run(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.jsonl", "summary.csv", "checkpoint.bin", "config.json", "load_stats.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), 4);
    assert!(fs::read_to_string(a.join("load_stats.csv"))
        .unwrap()
        .starts_with("layer,expert,count,fraction,mean_gate\n"));

    // re-running from the echoed config reproduces every file
    let b = dir.path().join("b");
    let echoed = a.join("config.json");
    assert!(run(&["train", "--config", echoed.to_str().unwrap(), "--out", b.to_str().unwrap()])
        .status
        .success());
    for f in ["metrics.jsonl", "summary.csv", "checkpoint.bin", "config.json", "load_stats.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_is_deterministic_and_changes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let go = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        assert!(run(&["train", "--config", &cfg, "--seed", seed, "--out", p.to_str().unwrap()])
            .status
            .success());
        fs::read(p.join("metrics.jsonl")).unwrap()
    };
    let a = go("a", "7");
    let b = go("b", "7");
    let c = go("c", "8");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let echoed = fs::read_to_string(dir.path().join("a/config.json")).unwrap();
    assert!(echoed.contains("\"seed\": 7"));
}

fn trained(dir: &Path, json: &str) -> String {
    let cfg = write_config(dir, json);
    let out = dir.join("run");
    assert!(run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    out.join("checkpoint.bin").to_str().unwrap().to_string()
}

#[test]
fn eval_modes() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path(), SMALL);
    let det1 = run(&["eval", "--checkpoint", &ck, "--inference-mode", "det"]);
    let det2 = run(&["eval", "--checkpoint", &ck, "--inference-mode", "det"]);
    assert!(det1.status.success());
    assert_eq!(det1.stdout, det2.stdout);
    let sampled = run(&["eval", "--checkpoint", &ck, "--inference-mode", "sampled", "--n-samples", "4"]);
    assert!(sampled.status.success());
    let v: serde_json::Value = serde_json::from_slice(&sampled.stdout).unwrap();
    assert_eq!(v["inference_mode"], "sampled");
    assert_eq!(v["n_samples"], 4);
    assert!(v["loss_std"].as_f64().unwrap() >= 0.0);
}

#[test]
fn gshard_rejects_sampled_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(
        dir.path(),
        r#"{"schema_version": 1, "estimator": {"kind": "gshard"}, "train": {"steps": 10}}"#,
    );
    let out = run(&["eval", "--checkpoint", &ck, "--inference-mode", "sampled"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("deterministic"));
    assert!(run(&["eval", "--checkpoint", &ck]).status.success());
}

#[test]
fn analyze_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path(), SMALL);
    let out_dir = dir.path().join("an");
    let out = run(&["analyze", "--checkpoint", &ck, "--dataset", "only=0,1", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(out_dir.join("similarity.csv")).unwrap(), "label,only\nonly,1\n");
    let routing = fs::read_to_string(out_dir.join("routing_only.csv")).unwrap();
    assert!(routing.starts_with("layer,expert,count,fraction\n"));
    // counts = top_k × tokens
    let total: u64 = routing.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 2 * 512);

    let bad = run(&["analyze", "--checkpoint", &ck, "--dataset", "x=99", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_fast_passes() {
    let out = run(&["gradcheck", "--level", "fast"]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.starts_with("CHECK"));
    assert!(!table.contains("FAIL"));
}
