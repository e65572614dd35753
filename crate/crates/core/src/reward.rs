//! Answer metrics, the gain-beyond-draft reward and its transition-shaped
//! variant, group-relative advantages, and rollout logging.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingProvider;
use crate::gateway::{
    extract_tagged, parse_judgement, render_answer_judge_prompt, render_reader_prompt, Gateway,
    GatewayError, Tag,
};
use crate::kb::KnowledgeBase;
use crate::retrieval::{top_k_triples, RetrievalError};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("golden answer list is empty")]
    NoGolds,
    #[error("reward group is empty")]
    EmptyGroup,
    #[error("rollout sink: {0}")]
    Sink(String),
}

/// Lowercase, strip punctuation, drop articles, split on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || matches!(c, '\u{2018}' | '\u{2019}' | '\u{201c}' | '\u{201d}')))
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(String::from)
        .collect()
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(n) = counts.get_mut(p.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-level F1 of `pred` against any gold answer.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_tokens(pred);
    golds
        .iter()
        .map(|g| f1_single(&p, &normalize_tokens(g)))
        .fold(0.0, f64::max)
}

/// True iff some normalized gold occurs as a contiguous token run in `pred`.
pub fn span_check(pred: &str, golds: &[String]) -> bool {
    let p = normalize_tokens(pred);
    golds.iter().any(|g| {
        let g = normalize_tokens(g);
        !g.is_empty() && p.windows(g.len()).any(|w| w == g.as_slice())
    })
}

/// Span match, falling back to the answer-judge role only on a miss.
pub fn gen_acc(question: &str, pred: &str, golds: &[String], gateway: &Gateway) -> Result<bool, RewardError> {
    if golds.is_empty() {
        return Err(RewardError::NoGolds);
    }
    if span_check(pred, golds) {
        return Ok(true);
    }
    let raw = gateway.complete(&render_answer_judge_prompt(question, golds, pred))?;
    Ok(parse_judgement(&extract_tagged(&raw, Tag::Judge)?.content)?)
}

/// Transition reward over (draft, refined) answer correctness.
pub fn shaped_reward(draft_correct: bool, refined_correct: bool) -> f64 {
    match (draft_correct, refined_correct) {
        (false, true) => 1.0,
        (true, false) => -0.3,
        (true, true) => 0.2,
        (false, false) => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: String,
    pub question: String,
    pub draft_answer: String,
    pub refined_answer: String,
    pub golds: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub query_id: String,
    pub draft_acc: u8,
    pub refined_acc: u8,
    pub gbd: i8,
    pub shaped: f64,
    pub f1_draft: f64,
    pub f1_refined: f64,
}

impl RewardRecord {
    pub fn from_accuracies(query_id: impl Into<String>, draft: bool, refined: bool, f1_draft: f64, f1_refined: f64) -> Self {
        RewardRecord {
            query_id: query_id.into(),
            draft_acc: u8::from(draft),
            refined_acc: u8::from(refined),
            gbd: i8::from(refined) - i8::from(draft),
            shaped: shaped_reward(draft, refined),
            f1_draft,
            f1_refined,
        }
    }
}

pub fn gbd(rec: &AnswerRecord, gateway: &Gateway) -> Result<RewardRecord, RewardError> {
    let draft = gen_acc(&rec.question, &rec.draft_answer, &rec.golds, gateway)?;
    let refined = gen_acc(&rec.question, &rec.refined_answer, &rec.golds, gateway)?;
    Ok(RewardRecord::from_accuracies(
        rec.query_id.clone(),
        draft,
        refined,
        token_f1(&rec.draft_answer, &rec.golds),
        token_f1(&rec.refined_answer, &rec.golds),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// `(R_i - mean) / std` with the population standard deviation. A group with
/// no spread gets all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<GroupAdvantage, RewardError> {
    if rewards.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let constant = rewards.iter().all(|r| *r == rewards[0]);
    let std = if constant {
        0.0
    } else {
        (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    let advantages = if std > 0.0 {
        rewards.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; rewards.len()]
    };
    Ok(GroupAdvantage { rewards: rewards.to_vec(), mean, std, advantages })
}

/// Dense-retrieval RAG answer: top-`n` triples as context for the reader role.
pub fn read_answer(
    question: &str,
    kb: &KnowledgeBase,
    n: usize,
    provider: &dyn EmbeddingProvider,
    gateway: &Gateway,
) -> Result<String, RewardError> {
    let sg = top_k_triples("reader", question, kb, n, provider)?;
    Ok(gateway.complete(&render_reader_prompt(question, &sg))?.trim().to_string())
}

/// One line of the rollout log consumed by an external policy trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub group_id: String,
    pub query_id: String,
    pub prompts: Vec<String>,
    pub responses: Vec<String>,
    pub actions: String,
    pub draft_acc: u8,
    pub refined_acc: u8,
    pub gbd: i8,
    pub shaped_reward: f64,
    pub advantage: Option<f64>,
}

/// Append-only JSONL sink; appends are serialized.
pub struct RolloutSink<W: Write> {
    out: Mutex<W>,
}

impl<W: Write> RolloutSink<W> {
    pub fn new(out: W) -> Self {
        RolloutSink { out: Mutex::new(out) }
    }

    pub fn append(&self, record: &RolloutRecord) -> Result<(), RewardError> {
        let line = serde_json::to_string(record).map_err(|e| RewardError::Sink(e.to_string()))?;
        let mut out = self.out.lock().map_err(|_| RewardError::Sink("sink lock poisoned".into()))?;
        writeln!(out, "{line}").map_err(|e| RewardError::Sink(e.to_string()))
    }

    pub fn into_inner(self) -> W {
        self.out.into_inner().unwrap_or_else(|p| p.into_inner())
    }
}

pub fn read_rollouts(reader: impl BufRead) -> Result<Vec<RolloutRecord>, RewardError> {
    reader
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| RewardError::Sink(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| RewardError::Sink(e.to_string()))
        })
        .collect()
}

/// Fills `advantage` per `group_id` from the shaped rewards.
pub fn fill_advantages(records: &mut [RolloutRecord]) -> Result<(), RewardError> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.group_id.clone()).or_default().push(i);
    }
    for idx in groups.values() {
        let rewards: Vec<f64> = idx.iter().map(|&i| records[i].shaped_reward).collect();
        let adv = group_advantages(&rewards)?;
        for (&i, a) in idx.iter().zip(adv.advantages) {
            records[i].advantage = Some(a);
        }
    }
    Ok(())
}
