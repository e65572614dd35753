//! Per-query refinement: the answerability loop, error abduction, action
//! generation and application, plus the sequential refinement stream.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::{coverage_set, greedy_select, CoverageConfig};
use crate::dsl::{apply_actions, parse_actions, render_actions, ApplyError, ApplyOptions, ApplyReport, RefinementAction, SyntaxError};
use crate::embed::EmbeddingProvider;
use crate::gateway::{
    extract_tagged, parse_judgement, render_abduction_prompt, render_actions_prompt, render_judge_prompt,
    ChatRequest, Gateway, GatewayError, Tag,
};
use crate::kb::{KnowledgeBase, Triple};
use crate::retrieval::{expand, top_k_triples, RetrievalConfig, RetrievalError, Subgraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("could not parse refinement actions: {0}")]
    Syntax(#[from] SyntaxError),
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error("query stream is empty")]
    EmptyStream,
    #[error("coverage selection failed: {0}")]
    Selection(String),
}

/// A user query with optional golden answers and source passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySample {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub golden_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub hop: usize,
    pub subgraph: Subgraph,
    pub answerable: bool,
    pub raw_judge_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionHistory {
    pub query_id: String,
    pub question: String,
    pub records: Vec<InteractionRecord>,
    /// How many trailing records are shown to the abduction step.
    pub horizon: usize,
}

impl InteractionHistory {
    pub fn new(query_id: impl Into<String>, question: impl Into<String>, horizon: usize) -> Self {
        InteractionHistory { query_id: query_id.into(), question: question.into(), records: Vec::new(), horizon }
    }

    pub fn window(&self) -> &[InteractionRecord] {
        let start = self.records.len().saturating_sub(self.horizon);
        &self.records[start..]
    }

    pub fn last(&self) -> Option<&InteractionRecord> {
        self.records.last()
    }

    pub fn answerable_at_start(&self) -> bool {
        self.records.first().is_some_and(|r| r.answerable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCategory {
    Incompleteness,
    Incorrectness,
    Redundancy,
}

const CATEGORY_KEYWORDS: &[(&str, IssueCategory)] = &[
    ("missing", IssueCategory::Incompleteness),
    ("absent", IssueCategory::Incompleteness),
    ("incorrect", IssueCategory::Incorrectness),
    ("wrong", IssueCategory::Incorrectness),
    ("contradict", IssueCategory::Incorrectness),
    ("ambiguous", IssueCategory::Redundancy),
    ("duplicate", IssueCategory::Redundancy),
    ("redundant", IssueCategory::Redundancy),
    ("coreference", IssueCategory::Redundancy),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueReport {
    pub text: String,
    pub categories: BTreeSet<IssueCategory>,
    pub raw: String,
}

impl IssueReport {
    /// Tags categories by keyword. Tags are informational only.
    pub fn from_text(text: impl Into<String>, raw: impl Into<String>) -> Self {
        let text = text.into();
        let lowered = text.to_lowercase();
        let categories = CATEGORY_KEYWORDS
            .iter()
            .filter(|(kw, _)| lowered.contains(kw))
            .map(|(_, c)| *c)
            .collect();
        IssueReport { text, categories, raw: raw.into() }
    }
}

/// A prompt/response pair captured for rollout logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub role: crate::gateway::Role,
    pub prompt: String,
    pub response: String,
}

impl Exchange {
    fn new(req: &ChatRequest, response: &str) -> Self {
        Exchange { role: req.role, prompt: format!("{}\n\n{}", req.system, req.user), response: response.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub query_id: String,
    pub skipped: bool,
    pub history: InteractionHistory,
    pub issues: Option<IssueReport>,
    pub actions: Vec<RefinementAction>,
    pub report: Option<ApplyReport>,
    pub failure: Option<String>,
    pub transcript: Vec<Exchange>,
    /// Inserted triples surfacing in a post-apply top-`n` retrieval.
    pub verification_hits: Option<usize>,
}

impl RefineOutcome {
    pub fn status(&self) -> &'static str {
        if self.failure.is_some() {
            "failed"
        } else if self.skipped {
            "skipped"
        } else {
            "applied"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub retrieval: RetrievalConfig,
    pub horizon: usize,
    pub apply: ApplyOptions,
    pub post_verify: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { retrieval: RetrievalConfig::default(), horizon: 3, apply: ApplyOptions::default(), post_verify: false }
    }
}

pub fn judge_answerable(question: &str, sg: &Subgraph, gateway: &Gateway) -> Result<(bool, String), PipelineError> {
    judge_with_request(question, sg, gateway).map(|(flag, raw, _)| (flag, raw))
}

fn judge_with_request(question: &str, sg: &Subgraph, gateway: &Gateway) -> Result<(bool, String, ChatRequest), PipelineError> {
    let req = render_judge_prompt(question, sg);
    let raw = gateway.complete(&req)?;
    let flag = parse_judgement(&extract_tagged(&raw, Tag::Judge)?.content)?;
    Ok((flag, raw, req))
}

struct Tracer<'a> {
    gateway: &'a Gateway,
    transcript: Vec<Exchange>,
}

impl Tracer<'_> {
    fn call(&mut self, req: &ChatRequest) -> Result<String, GatewayError> {
        let raw = self.gateway.complete(req)?;
        self.transcript.push(Exchange::new(req, &raw));
        Ok(raw)
    }
}

fn judgement_loop(
    sample: &QuerySample,
    kb: &KnowledgeBase,
    cfg: &RefineConfig,
    provider: &dyn EmbeddingProvider,
    tracer: &mut Tracer<'_>,
) -> Result<InteractionHistory, PipelineError> {
    let mut history = InteractionHistory::new(&sample.id, &sample.question, cfg.horizon);
    let mut sg = top_k_triples(&sample.id, &sample.question, kb, cfg.retrieval.n, provider)?;
    loop {
        let req = render_judge_prompt(&sample.question, &sg);
        let raw = tracer.call(&req)?;
        let answerable = parse_judgement(&extract_tagged(&raw, Tag::Judge)?.content)?;
        let hop = sg.hop;
        history.records.push(InteractionRecord { hop, subgraph: sg.clone(), answerable, raw_judge_text: raw });
        if answerable || hop >= cfg.retrieval.max_hops {
            return Ok(history);
        }
        sg = expand(&sample.question, kb, &sg, &cfg.retrieval, provider)?;
    }
}

/// Retrieve, judge, and expand until answerable or out of hops.
pub fn run_judgement_loop(
    sample: &QuerySample,
    kb: &KnowledgeBase,
    cfg: &RefineConfig,
    provider: &dyn EmbeddingProvider,
    gateway: &Gateway,
) -> Result<InteractionHistory, PipelineError> {
    judgement_loop(sample, kb, cfg, provider, &mut Tracer { gateway, transcript: Vec::new() })
}

pub fn abduce_issues(history: &InteractionHistory, gateway: &Gateway) -> Result<IssueReport, PipelineError> {
    abduce(history, &mut Tracer { gateway, transcript: Vec::new() })
}

fn abduce(history: &InteractionHistory, tracer: &mut Tracer<'_>) -> Result<IssueReport, PipelineError> {
    let req = render_abduction_prompt(history)?;
    let raw = tracer.call(&req)?;
    let content = extract_tagged(&raw, Tag::Abduction)?.content;
    Ok(IssueReport::from_text(content.trim(), raw))
}

pub fn generate_actions(
    question: &str,
    sg_final: &Subgraph,
    issues: &IssueReport,
    original_text: Option<&str>,
    gateway: &Gateway,
) -> Result<Vec<RefinementAction>, PipelineError> {
    generate(question, sg_final, issues, original_text, &mut Tracer { gateway, transcript: Vec::new() })
}

fn generate(
    question: &str,
    sg_final: &Subgraph,
    issues: &IssueReport,
    original_text: Option<&str>,
    tracer: &mut Tracer<'_>,
) -> Result<Vec<RefinementAction>, PipelineError> {
    let req = render_actions_prompt(original_text, sg_final, question, issues);
    let raw = tracer.call(&req)?;
    Ok(parse_actions(&extract_tagged(&raw, Tag::Refinement)?.content)?)
}

/// Runs all steps for one query. On any failure `kb` is left untouched and
/// the outcome carries the reason.
pub fn refine_query(
    sample: &QuerySample,
    kb: &mut KnowledgeBase,
    cfg: &RefineConfig,
    provider: &dyn EmbeddingProvider,
    gateway: &Gateway,
) -> RefineOutcome {
    let mut tracer = Tracer { gateway, transcript: Vec::new() };
    let mut outcome = RefineOutcome {
        query_id: sample.id.clone(),
        skipped: false,
        history: InteractionHistory::new(&sample.id, &sample.question, cfg.horizon),
        issues: None,
        actions: Vec::new(),
        report: None,
        failure: None,
        transcript: Vec::new(),
        verification_hits: None,
    };
    let result = refine_steps(sample, kb, cfg, provider, &mut tracer, &mut outcome);
    outcome.transcript = tracer.transcript;
    match result {
        Ok(Some(next)) => *kb = next,
        Ok(None) => {}
        Err(e) => {
            tracing::warn!(query = %sample.id, error = %e, "refinement failed; knowledge base unchanged");
            outcome.failure = Some(e.to_string());
        }
    }
    outcome
}

fn refine_steps(
    sample: &QuerySample,
    kb: &KnowledgeBase,
    cfg: &RefineConfig,
    provider: &dyn EmbeddingProvider,
    tracer: &mut Tracer<'_>,
    outcome: &mut RefineOutcome,
) -> Result<Option<KnowledgeBase>, PipelineError> {
    outcome.history = judgement_loop(sample, kb, cfg, provider, tracer)?;
    if outcome.history.answerable_at_start() {
        outcome.skipped = true;
        return Ok(None);
    }
    let issues = abduce(&outcome.history, tracer)?;
    let last = outcome.history.last().expect("loop records at least one hop");
    let actions = generate(&sample.question, &last.subgraph, &issues, sample.source_text.as_deref(), tracer)?;
    outcome.issues = Some(issues);
    outcome.actions = actions;
    let (next, report) = match apply_actions(kb, &outcome.actions, &cfg.apply) {
        Ok(ok) => ok,
        Err(ApplyError::BatchAborted { index, reason, report }) => {
            outcome.report = Some(*report.clone());
            return Err(ApplyError::BatchAborted { index, reason, report }.into());
        }
    };
    outcome.report = Some(report);
    if cfg.post_verify {
        let inserted: BTreeSet<&Triple> = outcome
            .actions
            .iter()
            .filter_map(|a| match a {
                RefinementAction::InsertEdge(t) => Some(t),
                _ => None,
            })
            .collect();
        let sg = top_k_triples(&sample.id, &sample.question, &next, cfg.retrieval.n, provider)?;
        outcome.verification_hits = Some(sg.triples().filter(|t| inserted.contains(t)).count());
    }
    Ok(Some(next))
}

/// One line of the stream report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub id: String,
    pub skipped: bool,
    pub hops: usize,
    pub n_actions: usize,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamReport {
    pub entries: Vec<StreamEntry>,
    pub outcomes: Vec<RefineOutcome>,
    pub selected: Option<Vec<String>>,
}

impl StreamReport {
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("stream entry serializes") + "\n")
            .collect()
    }
}

/// Source of elapsed time for stream reports.
pub trait Clock {
    fn start(&self) -> Box<dyn Fn() -> u64 + '_>;
}

pub struct WallClock;

impl Clock for WallClock {
    fn start(&self) -> Box<dyn Fn() -> u64 + '_> {
        let t0 = Instant::now();
        Box::new(move || t0.elapsed().as_millis() as u64)
    }
}

/// Always reports zero; keeps reports byte-reproducible.
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn start(&self) -> Box<dyn Fn() -> u64 + '_> {
        Box::new(|| 0)
    }
}

#[derive(Clone, Copy)]
pub struct StreamOptions<'a> {
    pub selector: Option<&'a CoverageConfig>,
    pub clock: &'a dyn Clock,
}

impl Default for StreamOptions<'_> {
    fn default() -> Self {
        StreamOptions { selector: None, clock: &WallClock }
    }
}

/// Picks the query ids the stream will refine, in greedy pick order.
pub fn select_queries(
    queries: &[QuerySample],
    kb: &KnowledgeBase,
    cfg: &CoverageConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<String>, PipelineError> {
    let covs = queries
        .iter()
        .map(|q| coverage_set(&q.id, &q.question, kb, cfg, provider))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::Selection(e.to_string()))?;
    Ok(greedy_select(&covs, cfg).into_iter().map(|s| s.query_id).collect())
}

/// Refines queries one after another; each sees the KB left by the previous
/// one. With a selector only the covering subset is refined, in stream order.
pub fn run_refine_stream(
    queries: &[QuerySample],
    kb: &mut KnowledgeBase,
    cfg: &RefineConfig,
    provider: &dyn EmbeddingProvider,
    gateway: &Gateway,
    opts: StreamOptions<'_>,
) -> Result<StreamReport, PipelineError> {
    if queries.is_empty() {
        return Err(PipelineError::EmptyStream);
    }
    let selected = match opts.selector {
        Some(sel) => Some(select_queries(queries, kb, sel, provider)?),
        None => None,
    };
    let chosen: Vec<&QuerySample> = match &selected {
        Some(ids) => {
            let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            queries.iter().filter(|q| ids.contains(q.id.as_str())).collect()
        }
        None => queries.iter().collect(),
    };
    let mut entries = Vec::with_capacity(chosen.len());
    let mut outcomes = Vec::with_capacity(chosen.len());
    for sample in chosen {
        let elapsed = opts.clock.start();
        let outcome = refine_query(sample, kb, cfg, provider, gateway);
        entries.push(StreamEntry {
            id: sample.id.clone(),
            skipped: outcome.skipped,
            hops: outcome.history.records.len().saturating_sub(1),
            n_actions: outcome.actions.len(),
            outcome: outcome.status().to_string(),
            error: outcome.failure.clone(),
            wall_ms: elapsed(),
        });
        outcomes.push(outcome);
    }
    Ok(StreamReport { entries, outcomes, selected })
}

/// Canonical action text of an outcome, for logs.
pub fn outcome_actions_text(outcome: &RefineOutcome) -> String {
    render_actions(&outcome.actions)
}
