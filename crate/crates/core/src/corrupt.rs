//! Controlled-defect benchmark construction: inject incompleteness,
//! incorrectness, or redundancy into per-sample KBs and keep the samples whose
//! answerability flips from good to bad.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{apply_actions, parse_actions, render_actions, ActionKind, ApplyOptions, RefinementAction};
use crate::embed::EmbeddingProvider;
use crate::gateway::prompts::{fill, render_triples, CORRUPTOR_SYSTEM, CORRUPTOR_USER};
use crate::gateway::{extract_tagged, ChatRequest, Gateway, Role, Tag};
use crate::kb::{KnowledgeBase, Triple};
use crate::retrieval::top_k_triples;
use crate::reward::{read_answer, span_check, token_f1};

#[derive(Debug, Error)]
pub enum CorruptError {
    #[error("no target triples to corrupt")]
    NoTarget,
    #[error("invalid corruption spec: {0}")]
    InvalidSpec(&'static str),
    #[error("corruption model failed: {0}")]
    Model(String),
    #[error("answering failed: {0}")]
    Reader(String),
    #[error("corruption actions do not apply: {0}")]
    Apply(String),
    #[error("sample {id}: replaying corruption actions does not reproduce the corrupted KB")]
    ReplayMismatch { id: String },
    #[error("benchmark line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Kb(#[from] crate::kb::KbError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Incompleteness,
    Incorrectness,
    Redundancy,
}

impl ErrorType {
    pub const ALL: [ErrorType; 3] = [ErrorType::Incompleteness, ErrorType::Incorrectness, ErrorType::Redundancy];

    pub fn name(self) -> &'static str {
        match self {
            ErrorType::Incompleteness => "incompleteness",
            ErrorType::Incorrectness => "incorrectness",
            ErrorType::Redundancy => "redundancy",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorType::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown error type `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedundancyMode {
    /// Rewrite an entity in one edge to an alias form.
    #[default]
    Alias,
    /// Insert near-duplicate triples with paraphrased relations.
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub error_type: ErrorType,
    pub max_actions: usize,
    /// Corruption only touches the top-`top_n` retrieved triples.
    pub top_n: usize,
    pub f1_keep_min: f64,
    pub f1_drop_max: f64,
    pub redundancy_mode: RedundancyMode,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            error_type: ErrorType::Incompleteness,
            max_actions: 5,
            top_n: 5,
            f1_keep_min: 0.95,
            f1_drop_max: 0.6,
            redundancy_mode: RedundancyMode::Alias,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), CorruptError> {
        if self.max_actions == 0 {
            return Err(CorruptError::InvalidSpec("max_actions must be at least 1"));
        }
        if self.top_n == 0 {
            return Err(CorruptError::InvalidSpec("top_n must be at least 1"));
        }
        if !(0.0 <= self.f1_drop_max && self.f1_drop_max < self.f1_keep_min && self.f1_keep_min <= 1.0) {
            return Err(CorruptError::InvalidSpec("need 0 <= f1_drop_max < f1_keep_min <= 1"));
        }
        Ok(())
    }
}

/// Where corruption actions come from.
#[derive(Clone, Copy)]
pub enum CorruptionSource<'a> {
    /// Deterministic chooser that uses the golden answers.
    Oracle,
    /// A model behind the corruptor gateway role.
    Model(&'a Gateway),
}

impl CorruptionSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionSource::Oracle => "oracle",
            CorruptionSource::Model(_) => "model",
        }
    }
}

/// Question-side context for one corruption.
#[derive(Debug, Clone)]
pub struct CorruptionContext<'a> {
    pub question: &'a str,
    pub golds: &'a [String],
    pub seed: u64,
}

fn answer_bearing<'t>(targets: &'t [Triple], golds: &[String]) -> Vec<&'t Triple> {
    targets
        .iter()
        .filter(|t| span_check(&t.head, golds) || span_check(&t.tail, golds))
        .collect()
}

/// Triples worth attacking: answer-bearing ones, or the top-ranked target.
fn critical<'t>(targets: &'t [Triple], golds: &[String]) -> Vec<&'t Triple> {
    let found = answer_bearing(targets, golds);
    if found.is_empty() {
        targets.iter().take(1).collect()
    } else {
        found
    }
}

/// Short alias of an entity: leading words shrink to initials.
pub fn alias_of(item: &str) -> String {
    let words: Vec<&str> = item.split_whitespace().collect();
    match words.as_slice() {
        [] => String::new(),
        [single] => format!("that {single}"),
        [init @ .., last] => {
            let mut out: Vec<String> = init
                .iter()
                .map(|w| w.chars().next().map(|c| format!("{c}.")).unwrap_or_default())
                .collect();
            out.push(last.to_string());
            out.join(" ")
        }
    }
}

fn edge(h: &str, r: &str, t: &str) -> Result<Triple, CorruptError> {
    Triple::new(h, r, t).map_err(|e| CorruptError::Apply(e.to_string()))
}

fn model_actions(
    kb: &KnowledgeBase,
    targets: &[Triple],
    spec: &CorruptionSpec,
    ctx: &CorruptionContext<'_>,
    gateway: &Gateway,
) -> Result<Vec<RefinementAction>, CorruptError> {
    let golds = serde_json::to_string(ctx.golds).expect("strings serialize");
    let max = spec.max_actions.to_string();
    let user = fill(
        CORRUPTOR_USER.trim(),
        &[
            ("error_type", spec.error_type.name()),
            ("question", ctx.question),
            ("golden_answers", &golds),
            ("triples_string", &render_triples(targets)),
        ],
    );
    let system = fill(CORRUPTOR_SYSTEM.trim(), &[("max_actions", &max)]);
    let raw = gateway
        .complete(&ChatRequest::new(Role::Corruptor, system, user))
        .map_err(|e| CorruptError::Model(e.to_string()))?;
    let block = extract_tagged(&raw, Tag::Refinement).map_err(|e| CorruptError::Model(e.to_string()))?;
    let parsed = parse_actions(&block.content).map_err(|e| CorruptError::Model(e.to_string()))?;
    let mut out = Vec::new();
    for action in parsed {
        let allowed = match (spec.error_type, action.kind()) {
            (ErrorType::Incompleteness, kind) => kind == ActionKind::DeleteEdge,
            (ErrorType::Incorrectness, kind) => kind != ActionKind::ReplaceNode,
            (ErrorType::Redundancy, _) => true,
        };
        if !allowed {
            tracing::debug!(%action, "dropping action outside the defect type");
            continue;
        }
        match action {
            // keep the rewrite to a single edge
            RefinementAction::ReplaceNode { old, new } => {
                if let Some(t) = targets.iter().chain(kb.triples()).find(|t| t.touches(&old)) {
                    let swap = |s: &str| if s == old { new.clone() } else { s.to_string() };
                    out.push(RefinementAction::DeleteEdge(t.clone()));
                    out.push(RefinementAction::InsertEdge(edge(&swap(&t.head), &t.relation, &swap(&t.tail))?));
                }
            }
            other => out.push(other),
        }
    }
    out.truncate(spec.max_actions);
    Ok(out)
}

fn check_targets(targets: &[Triple], spec: &CorruptionSpec) -> Result<(), CorruptError> {
    spec.validate()?;
    if targets.is_empty() {
        return Err(CorruptError::NoTarget);
    }
    Ok(())
}

/// Delete critical triples, at most `max_actions` of them.
pub fn corrupt_incompleteness(
    kb: &KnowledgeBase,
    targets: &[Triple],
    spec: &CorruptionSpec,
    source: CorruptionSource<'_>,
    ctx: &CorruptionContext<'_>,
) -> Result<Vec<RefinementAction>, CorruptError> {
    check_targets(targets, spec)?;
    if let CorruptionSource::Model(gw) = source {
        return model_actions(kb, targets, &CorruptionSpec { error_type: ErrorType::Incompleteness, ..*spec }, ctx, gw);
    }
    Ok(critical(targets, ctx.golds)
        .into_iter()
        .take(spec.max_actions)
        .map(|t| RefinementAction::DeleteEdge(t.clone()))
        .collect())
}

/// Rewrite the answer side of critical triples to a wrong value, as
/// delete+insert pairs.
pub fn corrupt_incorrectness(
    kb: &KnowledgeBase,
    targets: &[Triple],
    spec: &CorruptionSpec,
    source: CorruptionSource<'_>,
    ctx: &CorruptionContext<'_>,
) -> Result<Vec<RefinementAction>, CorruptError> {
    check_targets(targets, spec)?;
    if let CorruptionSource::Model(gw) = source {
        return model_actions(kb, targets, &CorruptionSpec { error_type: ErrorType::Incorrectness, ..*spec }, ctx, gw);
    }
    if spec.max_actions < 2 {
        return Err(CorruptError::InvalidSpec("incorrectness needs room for a delete+insert pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let decoys: Vec<&str> = kb
        .items()
        .filter(|i| !span_check(i, ctx.golds) && !ctx.golds.iter().any(|g| token_f1(i, std::slice::from_ref(g)) > 0.0))
        .collect();
    let mut out = Vec::new();
    for t in critical(targets, ctx.golds).into_iter().take(spec.max_actions / 2) {
        let tail_side = span_check(&t.tail, ctx.golds) || !span_check(&t.head, ctx.golds);
        let keep = if tail_side { &t.head } else { &t.tail };
        let options: Vec<&str> = decoys.iter().copied().filter(|d| d != keep).collect();
        let wrong = options.choose(&mut rng).map(|s| s.to_string()).unwrap_or_else(|| "an unrelated entity".to_string());
        let mutated = if tail_side { edge(&t.head, &t.relation, &wrong)? } else { edge(&wrong, &t.relation, &t.tail)? };
        if kb.contains(&mutated) {
            continue;
        }
        out.push(RefinementAction::DeleteEdge(t.clone()));
        out.push(RefinementAction::InsertEdge(mutated));
    }
    Ok(out)
}

fn paraphrase_relation(relation: &str) -> String {
    format!("is also {relation}")
}

/// Alias mode rewrites the answer item of one edge per pair; duplicate mode
/// inserts paraphrased copies of critical triples.
pub fn corrupt_redundancy(
    kb: &KnowledgeBase,
    targets: &[Triple],
    spec: &CorruptionSpec,
    source: CorruptionSource<'_>,
    ctx: &CorruptionContext<'_>,
) -> Result<Vec<RefinementAction>, CorruptError> {
    check_targets(targets, spec)?;
    if let CorruptionSource::Model(gw) = source {
        return model_actions(kb, targets, &CorruptionSpec { error_type: ErrorType::Redundancy, ..*spec }, ctx, gw);
    }
    let crit = critical(targets, ctx.golds);
    let mut out = Vec::new();
    match spec.redundancy_mode {
        RedundancyMode::Alias => {
            if spec.max_actions < 2 {
                return Err(CorruptError::InvalidSpec("alias rewrites need room for a delete+insert pair"));
            }
            for t in crit.into_iter().take(spec.max_actions / 2) {
                let on_tail = span_check(&t.tail, ctx.golds) || !span_check(&t.head, ctx.golds);
                let mutated = if on_tail {
                    edge(&t.head, &t.relation, &alias_of(&t.tail))?
                } else {
                    edge(&alias_of(&t.head), &t.relation, &t.tail)?
                };
                if kb.contains(&mutated) {
                    continue;
                }
                out.push(RefinementAction::DeleteEdge(t.clone()));
                out.push(RefinementAction::InsertEdge(mutated));
            }
        }
        RedundancyMode::Duplicate => {
            let pool: Vec<&Triple> = crit.iter().copied().chain(targets.iter()).collect();
            let mut seen = BTreeSet::new();
            for t in pool {
                if out.len() == spec.max_actions {
                    break;
                }
                let dup = edge(&t.head, &paraphrase_relation(&t.relation), &t.tail)?;
                if !kb.contains(&dup) && seen.insert(dup.clone()) {
                    out.push(RefinementAction::InsertEdge(dup));
                }
            }
        }
    }
    Ok(out)
}

pub fn corrupt(
    kb: &KnowledgeBase,
    targets: &[Triple],
    spec: &CorruptionSpec,
    source: CorruptionSource<'_>,
    ctx: &CorruptionContext<'_>,
) -> Result<Vec<RefinementAction>, CorruptError> {
    match spec.error_type {
        ErrorType::Incompleteness => corrupt_incompleteness(kb, targets, spec, source, ctx),
        ErrorType::Incorrectness => corrupt_incorrectness(kb, targets, spec, source, ctx),
        ErrorType::Redundancy => corrupt_redundancy(kb, targets, spec, source, ctx),
    }
}

/// A clean input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanSample {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    pub kb: KnowledgeBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub error_type: ErrorType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redundancy_mode: Option<RedundancyMode>,
    pub action_counts: BTreeMap<ActionKind, usize>,
    pub pre_f1: f64,
    pub post_f1: f64,
    pub source: String,
}

/// One benchmark line; KBs are referenced by path relative to the benchmark
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub question: String,
    pub golds: Vec<String>,
    pub clean_kb: String,
    pub corrupted_kb: String,
    pub corruption_actions: Vec<String>,
    pub metadata: SampleMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSample {
    pub record: BenchmarkRecord,
    pub clean_kb: KnowledgeBase,
    pub corrupted_kb: KnowledgeBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreFilter,
    Corrupt,
    PostFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub error_type: ErrorType,
    pub stage: Stage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkRun {
    pub accepted: Vec<BenchmarkSample>,
    pub rejected: Vec<Rejection>,
}

impl BenchmarkRun {
    /// Accepted sample count per error type.
    pub fn counts(&self) -> BTreeMap<ErrorType, usize> {
        let mut out = BTreeMap::new();
        for s in &self.accepted {
            *out.entry(s.record.metadata.error_type).or_default() += 1;
        }
        out
    }
}

/// Filename-safe form of a sample id.
pub fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn sample_seed(base: u64, id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    base ^ u64::from_le_bytes(h[..8].try_into().expect("digest has 8 bytes"))
}

fn reader_f1(
    sample: &CleanSample,
    kb: &KnowledgeBase,
    spec: &CorruptionSpec,
    provider: &dyn EmbeddingProvider,
    reader: &Gateway,
) -> Result<f64, CorruptError> {
    let answer = read_answer(&sample.question, kb, spec.top_n, provider, reader).map_err(|e| CorruptError::Reader(e.to_string()))?;
    Ok(token_f1(&answer, &sample.golden_answers))
}

fn process_sample(
    sample: &CleanSample,
    spec: &CorruptionSpec,
    source: CorruptionSource<'_>,
    provider: &dyn EmbeddingProvider,
    reader: &Gateway,
) -> Result<BenchmarkSample, Rejection> {
    let reject = |stage, reason: String| Rejection { id: sample.id.clone(), error_type: spec.error_type, stage, reason };
    let pre = reader_f1(sample, &sample.kb, spec, provider, reader).map_err(|e| reject(Stage::PreFilter, e.to_string()))?;
    if pre <= spec.f1_keep_min {
        return Err(reject(Stage::PreFilter, format!("pre-corruption F1 {pre:.3} not above {}", spec.f1_keep_min)));
    }
    let scope = top_k_triples(&sample.id, &sample.question, &sample.kb, spec.top_n, provider)
        .map_err(|e| reject(Stage::Corrupt, e.to_string()))?;
    let targets: Vec<Triple> = scope.triples().cloned().collect();
    let ctx = CorruptionContext { question: &sample.question, golds: &sample.golden_answers, seed: sample_seed(spec.seed, &sample.id) };
    let actions = corrupt(&sample.kb, &targets, spec, source, &ctx).map_err(|e| reject(Stage::Corrupt, e.to_string()))?;
    if actions.is_empty() {
        return Err(reject(Stage::Corrupt, "no corruption actions produced".into()));
    }
    let opts = ApplyOptions { max_actions: spec.max_actions, ..ApplyOptions::default() };
    let (corrupted, report) = apply_actions(&sample.kb, &actions, &opts).map_err(|e| reject(Stage::Corrupt, e.to_string()))?;
    let post = reader_f1(sample, &corrupted, spec, provider, reader).map_err(|e| reject(Stage::PostFilter, e.to_string()))?;
    if post >= spec.f1_drop_max {
        return Err(reject(Stage::PostFilter, format!("post-corruption F1 {post:.3} not below {}", spec.f1_drop_max)));
    }
    let stem = file_stem(&sample.id);
    Ok(BenchmarkSample {
        record: BenchmarkRecord {
            id: sample.id.clone(),
            question: sample.question.clone(),
            golds: sample.golden_answers.clone(),
            clean_kb: format!("kbs/{stem}.clean.jsonl"),
            corrupted_kb: format!("kbs/{stem}.corrupted.jsonl"),
            corruption_actions: actions.iter().map(ToString::to_string).collect(),
            metadata: SampleMetadata {
                error_type: spec.error_type,
                redundancy_mode: (spec.error_type == ErrorType::Redundancy).then_some(spec.redundancy_mode),
                action_counts: report.counts,
                pre_f1: pre,
                post_f1: post,
                source: source.name().to_string(),
            },
        },
        clean_kb: sample.kb.clone(),
        corrupted_kb: corrupted,
    })
}

/// Runs the keep/corrupt/drop pipeline. Sample `i` gets
/// `types[i % types.len()]`. Output is sorted by sample id.
pub fn build_benchmark(
    samples: &[CleanSample],
    types: &[ErrorType],
    spec: &CorruptionSpec,
    source: CorruptionSource<'_>,
    provider: &dyn EmbeddingProvider,
    reader: &Gateway,
) -> Result<BenchmarkRun, CorruptError> {
    spec.validate()?;
    if types.is_empty() {
        return Err(CorruptError::InvalidSpec("at least one error type is required"));
    }
    let results: Vec<Result<BenchmarkSample, Rejection>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = CorruptionSpec { error_type: types[i % types.len()], ..*spec };
            process_sample(s, &spec, source, provider, reader)
        })
        .collect();
    let mut run = BenchmarkRun::default();
    for r in results {
        match r {
            Ok(s) => run.accepted.push(s),
            Err(rej) => {
                tracing::info!(id = %rej.id, stage = ?rej.stage, reason = %rej.reason, "sample rejected");
                run.rejected.push(rej);
            }
        }
    }
    run.accepted.sort_by(|a, b| a.record.id.cmp(&b.record.id));
    run.rejected.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorruptionSpec,
    pub error_types: Vec<ErrorType>,
    pub source: String,
    pub accepted: usize,
    pub rejected: usize,
    pub counts: BTreeMap<ErrorType, usize>,
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

/// Writes `benchmark.jsonl`, `rejected.jsonl`, `manifest.json`, and the KBs
/// under `kbs/`.
pub fn write_benchmark(dir: &Path, run: &BenchmarkRun, manifest: &Manifest) -> Result<(), CorruptError> {
    fs::create_dir_all(dir.join("kbs"))?;
    for s in &run.accepted {
        s.clean_kb.save(dir.join(&s.record.clean_kb))?;
        s.corrupted_kb.save(dir.join(&s.record.corrupted_kb))?;
    }
    let records: Vec<&BenchmarkRecord> = run.accepted.iter().map(|s| &s.record).collect();
    fs::write(dir.join("benchmark.jsonl"), jsonl(&records))?;
    fs::write(dir.join("rejected.jsonl"), jsonl(&run.rejected))?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n")?;
    Ok(())
}

/// Loads a benchmark directory, checking that each corrupted KB is the
/// clean KB with its corruption actions replayed.
pub fn load_benchmark(dir: &Path) -> Result<Vec<BenchmarkSample>, CorruptError> {
    let file = fs::File::open(dir.join("benchmark.jsonl"))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: BenchmarkRecord =
            serde_json::from_str(&line).map_err(|e| CorruptError::Format { line: i + 1, reason: e.to_string() })?;
        let clean_kb = KnowledgeBase::load(resolve(dir, &record.clean_kb))?;
        let corrupted_kb = KnowledgeBase::load(resolve(dir, &record.corrupted_kb))?;
        let actions = parse_actions(&record.corruption_actions.join("|"))
            .map_err(|e| CorruptError::Format { line: i + 1, reason: e.to_string() })?;
        let opts = ApplyOptions { max_actions: actions.len().max(1), ..ApplyOptions::default() };
        let (replayed, _) = apply_actions(&clean_kb, &actions, &opts).map_err(|e| CorruptError::Apply(e.to_string()))?;
        if replayed != corrupted_kb {
            return Err(CorruptError::ReplayMismatch { id: record.id });
        }
        out.push(BenchmarkSample { record, clean_kb, corrupted_kb });
    }
    Ok(out)
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Canonical DSL text of a sample's corruption.
pub fn actions_text(actions: &[RefinementAction]) -> String {
    render_actions(actions)
}
