//! Shared helpers for the bundled mini benchmark: three clean samples, one per
//! defect type, corrupted by the oracle and repaired by a scripted refiner.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kbrefine_cli::{
    build_gateway, cmd_corrupt, cmd_eval, cmd_refine, CorruptArgs, EvalArgs, RefineArgs, RefineSummary, RunConfig,
};
use kbrefine_core::corrupt::{load_benchmark, BenchmarkSample, ErrorType, Manifest};
use kbrefine_core::dsl::{parse_actions, render_actions, RefinementAction};
use kbrefine_core::gateway::{ChatClient, ChatRequest, FnClient, Gateway, GatewayError, RecordingClient, Role};
use kbrefine_core::gateway::{ExactMatchJudge, ExtractiveReader};
use kbrefine_core::pipeline::QuerySample;
use kbrefine_core::reward::RewardRecord;

pub fn mini_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/mini")
}

pub fn mini_config() -> RunConfig {
    RunConfig::load(&mini_dir().join("config.toml")).expect("bundled config loads")
}

/// Config that replays the bundled refiner fixtures.
pub fn replay_config() -> RunConfig {
    let mut cfg = mini_config();
    cfg.gateway.mock_fixtures = Some(mini_dir().join("fixtures.jsonl"));
    cfg
}

pub fn build_mini_benchmark(out: &Path) -> Manifest {
    let cfg = mini_config();
    let args = CorruptArgs { input: mini_dir().join("clean/samples.jsonl"), out_dir: out.to_path_buf(), ..CorruptArgs::default() };
    cmd_corrupt(&cfg, &args, &build_gateway(&cfg).unwrap()).expect("mini benchmark builds")
}

fn issue_for(t: ErrorType) -> &'static str {
    match t {
        ErrorType::Incompleteness => "The triple stating the answer is missing from the retrieved subgraph.",
        ErrorType::Incorrectness => "The edge naming the answer is incorrect and contradicts the question.",
        ErrorType::Redundancy => "The answer entity appears under an ambiguous alias, a coreference defect.",
    }
}

/// The inverse of a corruption batch: undo each action, last first.
pub fn repair_actions(sample: &BenchmarkSample) -> Vec<RefinementAction> {
    let corruption = parse_actions(&sample.record.corruption_actions.join("|")).expect("recorded actions parse");
    corruption.iter().rev().map(RefinementAction::inverse).collect()
}

/// Refiner that never judges a corrupted subgraph answerable and emits the
/// exact repair for the sample whose question appears in the prompt.
pub fn perfect_refiner(samples: &[BenchmarkSample]) -> impl ChatClient {
    let script: Vec<(String, &'static str, String)> = samples
        .iter()
        .map(|s| (s.record.question.clone(), issue_for(s.record.metadata.error_type), render_actions(&repair_actions(s))))
        .collect();
    FnClient::new(move |req: &ChatRequest| -> Result<String, GatewayError> {
        let (_, issue, actions) = script
            .iter()
            .find(|(q, _, _)| req.user.contains(q.as_str()))
            .ok_or_else(|| GatewayError::Transport("prompt matches no mini sample".into()))?;
        Ok(match req.role {
            Role::RefinerJudge => "<judge>No</judge>".to_string(),
            Role::RefinerAbduction => format!("<abduction>{issue}</abduction>"),
            Role::RefinerActions => format!("<refinement>{actions}</refinement>"),
            other => return Err(GatewayError::NoRoute(other)),
        })
    })
}

pub fn with_builtin_scorers(gw: Gateway) -> Gateway {
    gw.route(Role::Reader, ExtractiveReader).route(Role::AnswerJudge, ExactMatchJudge)
}

pub struct SampleRun {
    pub sample: BenchmarkSample,
    pub out_dir: PathBuf,
    pub refine: RefineSummary,
    pub rewards: Vec<RewardRecord>,
}

/// Refines and evaluates every benchmark sample on its own corrupted KB.
pub fn run_mini(bench_dir: &Path, cfg: &RunConfig, gateway: &Gateway, work: &Path) -> Vec<SampleRun> {
    load_benchmark(bench_dir)
        .expect("benchmark loads")
        .into_iter()
        .map(|sample| {
            let out_dir = work.join(&sample.record.id);
            fs::create_dir_all(&out_dir).unwrap();
            let queries = out_dir.join("queries.jsonl");
            let q = QuerySample {
                id: sample.record.id.clone(),
                question: sample.record.question.clone(),
                golden_answers: sample.record.golds.clone(),
                source_text: None,
            };
            fs::write(&queries, serde_json::to_string(&q).unwrap() + "\n").unwrap();
            let corrupted = bench_dir.join(&sample.record.corrupted_kb);
            let args = RefineArgs { kb: corrupted.clone(), queries: queries.clone(), out_dir: out_dir.clone(), ..RefineArgs::default() };
            let refine = cmd_refine(cfg, &args, gateway).expect("refine runs");
            let eval = EvalArgs { draft_kb: corrupted, refined_kb: out_dir.join("refined_kb.jsonl"), queries, out_dir: out_dir.clone() };
            let (rewards, _) = cmd_eval(cfg, &eval, gateway).expect("eval runs");
            SampleRun { sample, out_dir, refine, rewards }
        })
        .collect()
}

/// Rebuilds the benchmark and the refiner fixtures under `out`.
pub fn regenerate(out: &Path) {
    let bench = out.join("benchmark");
    build_mini_benchmark(&bench);
    let samples = load_benchmark(&bench).unwrap();
    let recorder = Arc::new(RecordingClient::new(perfect_refiner(&samples)));
    let gw = with_builtin_scorers(Gateway::new().with_fallback(recorder.clone()));
    let mut cfg = mini_config();
    // the refine command insists on a configured model; the recorder stands in
    cfg.gateway.mock_fixtures = None;
    let work = tempfile::tempdir().unwrap();
    run_mini(&bench, &cfg, &gw, work.path());
    let mut buf = Vec::new();
    recorder.write_jsonl(&mut buf).unwrap();
    fs::write(out.join("fixtures.jsonl"), buf).unwrap();
}

/// Relative path and bytes of every file below `dir`, sorted.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
