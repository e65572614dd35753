mod common;

use std::fs;
use std::process::{Command, Output};

use common::mini_dir;

fn kbrefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbrefine")).args(args).output().expect("binary runs")
}

fn path(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_kb_is_usage_error() {
    let out = kbrefine(&["refine", "--kb", "/no/such/kb.jsonl", "--queries", "/no/such/q.jsonl", "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn bad_flags_and_config_are_usage_errors() {
    assert_eq!(kbrefine(&["refine"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[coverage]\nrho = 2.0\n").unwrap();
    let out = kbrefine(&["--config", path(&cfg), "select", "--kb", "x", "--queries", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn refine_without_model_is_usage_error() {
    let kb = mini_dir().join("clean/kbs/s0.jsonl");
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.jsonl");
    fs::write(&q, "{\"id\":\"a\",\"question\":\"Nanjing population\"}\n").unwrap();
    let out = kbrefine(&["refine", "--kb", path(&kb), "--queries", path(&q), "--out-dir", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dry_run_prints_plan() {
    let kb = mini_dir().join("clean/kbs/s0.jsonl");
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.jsonl");
    fs::write(&q, "{\"id\":\"a\",\"question\":\"Nanjing population\"}\n{\"id\":\"b\",\"question\":\"Seattle\"}\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = kbrefine(&["refine", "--kb", path(&kb), "--queries", path(&q), "--select", "--dry-run", "--out-dir", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("planned refinement of"), "{stdout}");
    assert!(!out_dir.exists());
}

#[test]
fn replayed_refine_then_eval() {
    let bench = mini_dir().join("benchmark");
    let fixtures = mini_dir().join("fixtures.jsonl");
    let config = mini_dir().join("config.toml");
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.jsonl");
    fs::write(
        &q,
        "{\"id\":\"s0\",\"question\":\"What was the population of Nanjing in 2010?\",\"golden_answers\":[\"8.005 million\"]}\n",
    )
    .unwrap();
    let corrupted = bench.join("kbs/s0.corrupted.jsonl");
    let common = ["--config", path(&config), "--mock-fixtures", path(&fixtures), "--out-dir", path(dir.path())];
    let out = Command::new(env!("CARGO_BIN_EXE_kbrefine"))
        .args(common)
        .args(["refine", "--kb", path(&corrupted), "--queries", path(&q)])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let refined = fs::read_to_string(dir.path().join("refined_kb.jsonl")).unwrap();
    assert_eq!(refined, fs::read_to_string(bench.join("kbs/s0.clean.jsonl")).unwrap());

    let refined_path = dir.path().join("refined_kb.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_kbrefine"))
        .args(common)
        .args(["eval", "--draft-kb", path(&corrupted), "--refined-kb", path(&refined_path), "--queries", path(&q)])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("transition 0->1"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mean_shaped"], 1.0);
}

#[test]
fn corrupt_all_types_is_idempotent() {
    let input = mini_dir().join("clean/samples.jsonl");
    let config = mini_dir().join("config.toml");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = kbrefine(&["--config", path(&config), "--out-dir", path(d.path()), "corrupt", "--input", path(&input), "--type", "all"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        for t in ["incompleteness: 1", "incorrectness: 1", "redundancy: 1"] {
            assert!(stdout.contains(t), "{stdout}");
        }
    }
    assert_eq!(common::tree(a.path()), common::tree(b.path()));
}
