use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn acl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acl")).args(args).output().expect("run acl")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn domain(name: &str, seed: u64) -> Value {
    json!({ "train": { "kind": "synthetic", "name": name, "dim": 6, "classes": 6, "noise": 0.3, "seed": seed,
                       "transform": { "kind": "rotation", "seed": seed } } })
}

fn train_config(mode: &str, n_outputs: usize) -> Value {
    json!({
        "model": { "input_dim": 6, "n_outputs": n_outputs, "d_model": 16, "n_heads": 2, "n_layers": 2, "init_seed": 1 },
        "domains": [domain("a", 1), domain("b", 2)],
        "episodes": { "n_way": 3, "k_shot": 2, "n_tasks": 2, "mode": mode },
        "steps": 6,
        "batch_size": 2,
        "seed": 3
    })
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Meta-trains the small DIL model into `dir/train` and returns that dir.
fn trained(dir: &Path) -> PathBuf {
    let cfg = write_json(dir, "train.json", &train_config("dil", 3));
    let out = dir.join("train");
    let o = acl(&["meta-train", "--config", path_str(&cfg), "--out", path_str(&out), "--log-every", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn missing_key_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = train_config("dil", 3);
    cfg.as_object_mut().unwrap().remove("steps");
    let p = write_json(dir.path(), "c.json", &cfg);
    let o = acl(&["meta-train", "--config", path_str(&p), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("steps"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = train_config("dil", 3);
    cfg["episodes"]["n_shots"] = json!(4);
    let p = write_json(dir.path(), "c.json", &cfg);
    let o = acl(&["meta-train", "--config", path_str(&p), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_shots"), "{}", stderr(&o));
}

#[test]
fn meta_train_writes_logs_and_checkpoints_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ta, tb) = (trained(a.path()), trained(b.path()));
    for f in ["config.json", "train_log.csv", "terms.csv", "best.ckpt", "last.ckpt"] {
        let x = std::fs::read(ta.join(f)).unwrap();
        assert_eq!(x, std::fs::read(tb.join(f)).unwrap(), "{f} differs");
    }
    let log = std::fs::read_to_string(ta.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,lr,loss,grad_norm,val_acc"));
    assert_eq!(log.lines().count(), 7);
}

#[test]
fn dil_checkpoint_against_cil_protocol_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let train = trained(dir.path());
    let eval = json!({
        "checkpoint": train.join("last.ckpt"),
        "protocol": { "n_way": 3, "k_shot": 2, "mode": "cil", "runs": 1, "episodes_per_run": 2 },
        "tasks": { "kind": "sources", "sources": [domain("a", 1)["train"], domain("b", 2)["train"]] }
    });
    let p = write_json(dir.path(), "eval.json", &eval);
    let o = acl(&["meta-test", "--config", path_str(&p), "--out", path_str(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("outputs"), "{}", stderr(&o));
}

#[test]
fn ten_runs_give_ten_files_and_a_consistent_summary() {
    let dir = tempfile::tempdir().unwrap();
    let train = trained(dir.path());
    let eval = json!({
        "checkpoint": train.join("last.ckpt"),
        "protocol": { "n_way": 3, "k_shot": 2, "runs": 10, "episodes_per_run": 3, "queries_per_class": 2 },
        "tasks": { "kind": "sources", "sources": [domain("a", 1)["train"], domain("b", 2)["train"]] }
    });
    let p = write_json(dir.path(), "eval.json", &eval);
    let out = dir.path().join("e");
    let o = acl(&["meta-test", "--config", path_str(&p), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("avg_acc"));

    let mut per_run = Vec::new();
    for i in 0..10 {
        let text = std::fs::read_to_string(out.join(format!("run_{i:02}.csv"))).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("boundary,task,accuracy,baseline"));
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        let last: Vec<f64> = rows.iter().filter(|r| r[0] == "2").map(|r| r[2].parse().unwrap()).collect();
        assert_eq!(last.len(), 2);
        per_run.push(last.iter().sum::<f64>() / 2.0);
    }
    assert!(!out.join("run_10.csv").exists());
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let mean = summary["avg_acc"]["mean"].as_f64().unwrap();
    assert!((mean - per_run.iter().sum::<f64>() / 10.0).abs() < 1e-12);
    assert!(summary["avg_acc"]["std"].as_f64().is_some());
}

#[test]
fn analyze_emits_six_series_for_two_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let train = trained(dir.path());
    let curves = dir.path().join("curves.csv");
    let o = acl(&["analyze", "--log", path_str(&train.join("terms.csv")), "--out", path_str(&curves)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("6 series"), "{}", stdout(&o));
    let text = std::fs::read_to_string(curves).unwrap();
    assert_eq!(text.lines().next(), Some("series,kind,domain,position,step,count,value"));
}

#[test]
fn analyze_reports_the_line_of_a_malformed_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("terms.csv");
    std::fs::write(&log, "step,boundary,task,domain,kind,value\n1,1,1,a,learn,0.5\n2,1,one,a,learn,0.4\n").unwrap();
    let o = acl(&["analyze", "--log", path_str(&log), "--out", path_str(&dir.path().join("c.csv"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn snapshots_file_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let train = trained(dir.path());
    let cfg = json!({
        "checkpoint": train.join("last.ckpt"),
        "sources": [domain("a", 1)["train"]],
        "n_way": 3,
        "k_shot": 2,
        "stride": 2
    });
    let p = write_json(dir.path(), "snap.json", &cfg);
    let out = dir.path().join("s");
    let o = acl(&["snapshots", "--config", path_str(&p), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("snapshots.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,layer,head,block,row,col,value"));
    assert!(lines.count() > 0);
}

#[test]
fn gradcheck_passes_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = acl(&["gradcheck", "--out", path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let train = trained(dir.path());
    let ckpt = train.join("last.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let cfg = write_json(dir.path(), "train.json", &train_config("dil", 3));
    let o = acl(&["meta-train", "--config", path_str(&cfg), "--resume", path_str(&ckpt), "--out", path_str(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
