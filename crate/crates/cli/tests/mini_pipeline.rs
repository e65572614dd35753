mod common;

use std::fs;

use common::*;
use kbrefine_cli::{build_gateway, cmd_eval, cmd_refine, cmd_select, EvalArgs, RefineArgs, SelectArgs};
use kbrefine_core::corrupt::{load_benchmark, ErrorType};
use kbrefine_core::kb::KnowledgeBase;

#[test]
fn bundled_data_matches_regeneration() {
    let fresh = tempfile::tempdir().unwrap();
    regenerate(fresh.path());
    if std::env::var_os("KBREFINE_REGENERATE").is_some() {
        let dst = mini_dir();
        let _ = fs::remove_dir_all(dst.join("benchmark"));
        for (rel, bytes) in tree(fresh.path()) {
            let path = dst.join(rel);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(path, bytes).unwrap();
        }
    }
    assert_eq!(tree(&fresh.path().join("benchmark")), tree(&mini_dir().join("benchmark")));
    assert_eq!(fs::read(fresh.path().join("fixtures.jsonl")).unwrap(), fs::read(mini_dir().join("fixtures.jsonl")).unwrap());
}

#[test]
fn benchmark_has_one_sample_per_type() {
    let samples = load_benchmark(&mini_dir().join("benchmark")).unwrap();
    let types: Vec<ErrorType> = samples.iter().map(|s| s.record.metadata.error_type).collect();
    assert_eq!(types, ErrorType::ALL);
}

#[test]
fn replayed_refinement_restores_clean_kbs() {
    let cfg = replay_config();
    let gw = build_gateway(&cfg).unwrap();
    let work = tempfile::tempdir().unwrap();
    for run in run_mini(&mini_dir().join("benchmark"), &cfg, &gw, work.path()) {
        let refined = KnowledgeBase::load(run.out_dir.join("refined_kb.jsonl")).unwrap();
        assert_eq!(refined, run.sample.clean_kb, "sample {}", run.sample.record.id);
        assert_eq!(run.refine.applied, 1);
        assert_eq!(run.rewards[0].shaped, 1.0);
        let rollouts = fs::read_to_string(run.out_dir.join("rollouts.jsonl")).unwrap();
        assert_eq!(rollouts.lines().count(), 1);
    }
}

#[test]
fn dry_run_writes_nothing() {
    let cfg = replay_config();
    let gw = build_gateway(&cfg).unwrap();
    let sample = &load_benchmark(&mini_dir().join("benchmark")).unwrap()[0];
    let work = tempfile::tempdir().unwrap();
    let queries = work.path().join("q.jsonl");
    fs::write(&queries, format!("{{\"id\":\"s0\",\"question\":{:?}}}\n", sample.record.question)).unwrap();
    let out_dir = work.path().join("out");
    let args = RefineArgs {
        kb: mini_dir().join("benchmark").join(&sample.record.corrupted_kb),
        queries,
        out_dir: out_dir.clone(),
        select: true,
        dry_run: true,
    };
    let summary = cmd_refine(&cfg, &args, &gw).unwrap();
    assert_eq!(summary.selected, Some(vec!["s0".to_string()]));
    assert!(!out_dir.exists());
}

#[test]
fn eval_of_identical_kbs_has_zero_gain() {
    let cfg = mini_config();
    let gw = build_gateway(&cfg).unwrap();
    let work = tempfile::tempdir().unwrap();
    let queries = work.path().join("q.jsonl");
    let clean = mini_dir().join("clean");
    let lines: String = fs::read_to_string(clean.join("samples.jsonl")).unwrap().lines().take(1).map(|l| format!("{l}\n")).collect();
    fs::write(&queries, lines).unwrap();
    let kb = clean.join("kbs/s0.jsonl");
    let (records, summary) =
        cmd_eval(&cfg, &EvalArgs { draft_kb: kb.clone(), refined_kb: kb, queries, out_dir: work.path().into() }, &gw).unwrap();
    assert_eq!(summary.mean_gbd, 0.0);
    assert_eq!(summary.transitions.get("1->1"), Some(&1));
    assert_eq!(summary.mean_shaped, records.iter().map(|r| r.shaped).sum::<f64>() / records.len() as f64);
}

#[test]
fn select_defaults_echo_preset_table() {
    let cfg = mini_config();
    let work = tempfile::tempdir().unwrap();
    let queries = work.path().join("q.jsonl");
    fs::write(&queries, "{\"id\":\"a\",\"question\":\"population of Nanjing\"}\n{\"id\":\"b\",\"question\":\"Seattle\"}\n").unwrap();
    let args = SelectArgs { kb: mini_dir().join("clean/kbs/s0.jsonl"), queries, out_dir: work.path().into(), dry_run: false };
    let (cov, sel) = cmd_select(&cfg, &args).unwrap();
    assert_eq!((cov.k, cov.m, cov.budget, cov.rho), (10, 500, 1000, 0.8));
    assert!(!sel.is_empty());
    let first = cmd_select(&cfg, &args).unwrap().1;
    let written = fs::read_to_string(work.path().join("selection.jsonl")).unwrap();
    assert_eq!(written.lines().count(), first.len());
    assert_eq!(first, sel);
}
