//! Command implementations behind the `kbrefine` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kbrefine_core::corrupt::{self, build_benchmark, CleanSample, CorruptionSource, ErrorType, Manifest, RedundancyMode};
use kbrefine_core::coverage::{coverage_set, greedy_select, CoverageConfig, Selection};
use kbrefine_core::embed::{CachedEmbedder, EmbeddingProvider, HashEmbedder};
use kbrefine_core::gateway::{ChatClient, ExactMatchJudge, ExtractiveReader, Gateway, Role, ScriptedMock};
use kbrefine_core::kb::KnowledgeBase;
use kbrefine_core::pipeline::{run_refine_stream, FrozenClock, QuerySample, StreamOptions, WallClock};
use kbrefine_core::reward::{fill_advantages, gbd, read_answer, AnswerRecord, RewardRecord, RolloutRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, or input paths.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn load_kb(path: &Path) -> Result<KnowledgeBase, CliError> {
    require_file(path, "knowledge base")?;
    KnowledgeBase::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn load_queries(path: &Path) -> Result<Vec<QuerySample>, CliError> {
    require_file(path, "query file")?;
    let file = fs::File::open(path).map_err(runtime)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let q = serde_json::from_str(&line)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(q);
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("query file {} is empty", path.display())));
    }
    Ok(out)
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    rows.into_iter().map(|r| serde_json::to_string(&r).expect("record serializes") + "\n").collect()
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Embedder configured by the run; the cache is loaded when present.
pub fn build_embedder(cfg: &RunConfig) -> Result<CachedEmbedder<HashEmbedder>, CliError> {
    let e = CachedEmbedder::new(HashEmbedder::new(cfg.embedding.dim, cfg.seed));
    if let Some(path) = &cfg.embedding.cache {
        if path.exists() {
            e.load_cache(path).map_err(|err| CliError::Usage(format!("{}: {err}", path.display())))?;
        }
    }
    Ok(e)
}

fn save_embedding_cache(cfg: &RunConfig, e: &CachedEmbedder<HashEmbedder>) -> Result<(), CliError> {
    match &cfg.embedding.cache {
        Some(path) => e.save_cache(path).map_err(runtime),
        None => Ok(()),
    }
}

fn model_client(cfg: &RunConfig) -> Result<Option<Arc<dyn ChatClient>>, CliError> {
    if let Some(path) = &cfg.gateway.mock_fixtures {
        let mock = ScriptedMock::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        return Ok(Some(Arc::new(mock)));
    }
    let Some(endpoint) = &cfg.gateway.endpoint else { return Ok(None) };
    http_client(cfg, endpoint).map(Some)
}

#[cfg(feature = "http")]
fn http_client(cfg: &RunConfig, endpoint: &str) -> Result<Arc<dyn ChatClient>, CliError> {
    use kbrefine_core::gateway::{HttpChatClient, RetryingClient};
    let model = cfg.gateway.model.clone().ok_or_else(|| CliError::Usage("gateway.model is required with an endpoint".into()))?;
    let key = cfg.gateway.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
    Ok(Arc::new(RetryingClient::new(HttpChatClient::new(endpoint, model, key), cfg.gateway.retries)))
}

#[cfg(not(feature = "http"))]
fn http_client(_cfg: &RunConfig, _endpoint: &str) -> Result<Arc<dyn ChatClient>, CliError> {
    Err(CliError::Usage("this build has no HTTP support; rebuild with `--features http` or use --mock-fixtures".into()))
}

/// Gateway with built-in reader/judge routes and the configured model (mock
/// fixtures or HTTP) for everything else.
pub fn build_gateway(cfg: &RunConfig) -> Result<Gateway, CliError> {
    let mut gw = Gateway::new();
    if let Some(client) = model_client(cfg)? {
        gw = gw.with_fallback(client);
    }
    if cfg.gateway.reader == config::ReaderMode::Extractive {
        gw = gw.route(Role::Reader, ExtractiveReader);
    }
    if cfg.gateway.answer_judge == config::JudgeMode::ExactMatch {
        gw = gw.route(Role::AnswerJudge, ExactMatchJudge);
    }
    Ok(gw)
}

fn has_model(cfg: &RunConfig) -> bool {
    cfg.gateway.mock_fixtures.is_some() || cfg.gateway.endpoint.is_some()
}

#[derive(Debug, Clone, Default)]
pub struct RefineArgs {
    pub kb: PathBuf,
    pub queries: PathBuf,
    pub out_dir: PathBuf,
    /// Run coverage selection before refining.
    pub select: bool,
    pub dry_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub queries: usize,
    pub attempted: usize,
    pub applied: usize,
    pub skipped: usize,
    pub failed: usize,
    pub selected: Option<Vec<String>>,
    pub kb_revision: u64,
    pub dry_run: bool,
}

fn selection_for(
    queries: &[QuerySample],
    kb: &KnowledgeBase,
    cov: &CoverageConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<Selection>, CliError> {
    let covs = queries
        .iter()
        .map(|q| coverage_set(&q.id, &q.question, kb, cov, provider))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    Ok(greedy_select(&covs, cov))
}

/// Refines the KB with the query stream. Writes `refined_kb.jsonl`,
/// `stream_report.jsonl`, `rollouts.jsonl`, and `selection.jsonl` when
/// selection ran.
pub fn cmd_refine(cfg: &RunConfig, args: &RefineArgs, gateway: &Gateway) -> Result<RefineSummary, CliError> {
    cfg.validate()?;
    let initial = load_kb(&args.kb)?;
    let queries = load_queries(&args.queries)?;
    let embedder = build_embedder(cfg)?;
    let cov = cfg.coverage_config()?;

    if args.dry_run {
        let selected: Vec<String> = if args.select {
            selection_for(&queries, &initial, &cov, &embedder)?.into_iter().map(|s| s.query_id).collect()
        } else {
            queries.iter().map(|q| q.id.clone()).collect()
        };
        return Ok(RefineSummary {
            queries: queries.len(),
            attempted: 0,
            applied: 0,
            skipped: 0,
            failed: 0,
            selected: Some(selected),
            kb_revision: initial.revision(),
            dry_run: true,
        });
    }

    let refine_cfg = cfg.refine_config();
    let mut kb = initial.clone();
    let opts = StreamOptions {
        selector: args.select.then_some(&cov),
        clock: if cfg.refine.record_timing { &WallClock } else { &FrozenClock },
    };
    let report = run_refine_stream(&queries, &mut kb, &refine_cfg, &embedder, gateway, opts).map_err(runtime)?;
    tracing::info!(attempted = report.entries.len(), revision = kb.revision(), "refinement stream finished");

    let by_id: BTreeMap<&str, &QuerySample> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut rollouts = Vec::new();
    for outcome in &report.outcomes {
        let sample = by_id[outcome.query_id.as_str()];
        if sample.golden_answers.is_empty() {
            continue;
        }
        let reward = score_query(sample, &initial, &kb, cfg, &embedder, gateway)?;
        rollouts.push(RolloutRecord {
            group_id: sample.id.clone(),
            query_id: sample.id.clone(),
            prompts: outcome.transcript.iter().map(|x| x.prompt.clone()).collect(),
            responses: outcome.transcript.iter().map(|x| x.response.clone()).collect(),
            actions: kbrefine_core::dsl::render_actions(&outcome.actions),
            draft_acc: reward.draft_acc,
            refined_acc: reward.refined_acc,
            gbd: reward.gbd,
            shaped_reward: reward.shaped,
            advantage: None,
        });
    }
    fill_advantages(&mut rollouts).map_err(runtime)?;

    write(args.out_dir.join("refined_kb.jsonl"), &kb.to_jsonl_string())?;
    write(args.out_dir.join("stream_report.jsonl"), &report.to_jsonl())?;
    write(args.out_dir.join("rollouts.jsonl"), &jsonl(&rollouts))?;
    if args.select {
        let sel = selection_for(&queries, &initial, &cov, &embedder)?;
        write(args.out_dir.join("selection.jsonl"), &jsonl(&sel))?;
    }
    save_embedding_cache(cfg, &embedder)?;

    let count = |s: &str| report.entries.iter().filter(|e| e.outcome == s).count();
    Ok(RefineSummary {
        queries: queries.len(),
        attempted: report.entries.len(),
        applied: count("applied"),
        skipped: count("skipped"),
        failed: count("failed"),
        selected: report.selected.clone(),
        kb_revision: kb.revision(),
        dry_run: false,
    })
}

fn score_query(
    sample: &QuerySample,
    draft: &KnowledgeBase,
    refined: &KnowledgeBase,
    cfg: &RunConfig,
    provider: &dyn EmbeddingProvider,
    gateway: &Gateway,
) -> Result<RewardRecord, CliError> {
    let n = cfg.retrieval.n;
    let record = AnswerRecord {
        query_id: sample.id.clone(),
        question: sample.question.clone(),
        draft_answer: read_answer(&sample.question, draft, n, provider, gateway).map_err(runtime)?,
        refined_answer: read_answer(&sample.question, refined, n, provider, gateway).map_err(runtime)?,
        golds: sample.golden_answers.clone(),
    };
    gbd(&record, gateway).map_err(runtime)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub draft_kb: PathBuf,
    pub refined_kb: PathBuf,
    pub queries: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub queries: usize,
    pub mean_gbd: f64,
    pub mean_shaped: f64,
    pub mean_f1_draft: f64,
    pub mean_f1_refined: f64,
    pub draft_accuracy: f64,
    pub refined_accuracy: f64,
    /// Counts keyed by `draft->refined` accuracy, e.g. `0->1`.
    pub transitions: BTreeMap<String, usize>,
}

impl EvalSummary {
    pub fn from_records(records: &[RewardRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RewardRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let mut transitions = BTreeMap::new();
        for r in records {
            *transitions.entry(format!("{}->{}", r.draft_acc, r.refined_acc)).or_default() += 1;
        }
        EvalSummary {
            queries: records.len(),
            mean_gbd: mean(&|r| f64::from(r.gbd)),
            mean_shaped: mean(&|r| r.shaped),
            mean_f1_draft: mean(&|r| r.f1_draft),
            mean_f1_refined: mean(&|r| r.f1_refined),
            draft_accuracy: mean(&|r| f64::from(r.draft_acc)),
            refined_accuracy: mean(&|r| f64::from(r.refined_acc)),
            transitions,
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<18} {:>10}\n", "metric", "value"));
        for (k, v) in [
            ("queries", self.queries as f64),
            ("mean GBD", self.mean_gbd),
            ("mean shaped", self.mean_shaped),
            ("draft accuracy", self.draft_accuracy),
            ("refined accuracy", self.refined_accuracy),
            ("mean F1 draft", self.mean_f1_draft),
            ("mean F1 refined", self.mean_f1_refined),
        ] {
            s.push_str(&format!("{k:<18} {v:>10.4}\n"));
        }
        for (k, v) in &self.transitions {
            s.push_str(&format!("{:<18} {v:>10}\n", format!("transition {k}")));
        }
        s
    }
}

/// Scores draft vs refined KB answers. Writes `rewards.jsonl` and
/// `eval_summary.json`.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, gateway: &Gateway) -> Result<(Vec<RewardRecord>, EvalSummary), CliError> {
    cfg.validate()?;
    let draft = load_kb(&args.draft_kb)?;
    let refined = load_kb(&args.refined_kb)?;
    let queries = load_queries(&args.queries)?;
    if let Some(q) = queries.iter().find(|q| q.golden_answers.is_empty()) {
        return Err(CliError::Usage(format!("query {} has no golden answers", q.id)));
    }
    let embedder = build_embedder(cfg)?;
    let records = queries
        .iter()
        .map(|q| score_query(q, &draft, &refined, cfg, &embedder, gateway))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = EvalSummary::from_records(&records);
    write(args.out_dir.join("rewards.jsonl"), &jsonl(&records))?;
    write(args.out_dir.join("eval_summary.json"), &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;
    save_embedding_cache(cfg, &embedder)?;
    Ok((records, summary))
}

#[derive(Debug, Clone, Default)]
pub struct SelectArgs {
    pub kb: PathBuf,
    pub queries: PathBuf,
    pub out_dir: PathBuf,
    pub dry_run: bool,
}

/// Greedy coverage selection. Writes `selection.jsonl` unless dry-run.
pub fn cmd_select(cfg: &RunConfig, args: &SelectArgs) -> Result<(CoverageConfig, Vec<Selection>), CliError> {
    cfg.validate()?;
    let kb = load_kb(&args.kb)?;
    let queries = load_queries(&args.queries)?;
    let cov = cfg.coverage_config()?;
    let embedder = build_embedder(cfg)?;
    let sel = selection_for(&queries, &kb, &cov, &embedder)?;
    if !args.dry_run {
        write(args.out_dir.join("selection.jsonl"), &jsonl(&sel))?;
        save_embedding_cache(cfg, &embedder)?;
    }
    Ok((cov, sel))
}

/// One input line for `corrupt`: the KB path is relative to the input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    pub kb: PathBuf,
}

pub fn load_corpus(path: &Path) -> Result<Vec<CleanSample>, CliError> {
    require_file(path, "corpus file")?;
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path).map_err(runtime)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: CorpusLine = serde_json::from_str(line)
            .map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(CleanSample { id: row.id, question: row.question, golden_answers: row.golden_answers, kb: load_kb(&base.join(&row.kb))? });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceKind {
    #[default]
    Oracle,
    Model,
}

#[derive(Debug, Clone, Default)]
pub struct CorruptArgs {
    pub input: PathBuf,
    pub out_dir: PathBuf,
    /// Empty means every type, assigned round-robin.
    pub types: Vec<ErrorType>,
    pub redundancy_mode: Option<RedundancyMode>,
    pub source: SourceKind,
    pub dry_run: bool,
}

/// Builds a corruption benchmark directory from clean samples.
pub fn cmd_corrupt(cfg: &RunConfig, args: &CorruptArgs, gateway: &Gateway) -> Result<Manifest, CliError> {
    cfg.validate()?;
    let samples = load_corpus(&args.input)?;
    let types = if args.types.is_empty() { ErrorType::ALL.to_vec() } else { args.types.clone() };
    let mut spec = cfg.corruption_spec();
    if let Some(mode) = args.redundancy_mode {
        spec.redundancy_mode = mode;
    }
    let source = match args.source {
        SourceKind::Oracle => CorruptionSource::Oracle,
        SourceKind::Model if has_model(cfg) => CorruptionSource::Model(gateway),
        SourceKind::Model => return Err(CliError::Usage("model corruption needs --mock-fixtures or gateway.endpoint".into())),
    };
    let embedder = build_embedder(cfg)?;
    let run = build_benchmark(&samples, &types, &spec, source, &embedder, gateway).map_err(runtime)?;
    tracing::info!(accepted = run.accepted.len(), rejected = run.rejected.len(), "benchmark built");
    let manifest = Manifest {
        spec,
        error_types: types,
        source: source.name().to_string(),
        accepted: run.accepted.len(),
        rejected: run.rejected.len(),
        counts: run.counts(),
    };
    if !args.dry_run {
        corrupt::write_benchmark(&args.out_dir, &run, &manifest).map_err(runtime)?;
        save_embedding_cache(cfg, &embedder)?;
    }
    Ok(manifest)
}

/// Whether the refine path has a model to talk to.
pub fn require_model(cfg: &RunConfig) -> Result<(), CliError> {
    if has_model(cfg) {
        Ok(())
    } else {
        Err(CliError::Usage("no model configured: pass --mock-fixtures or set gateway.endpoint".into()))
    }
}
