//! Greedy maximum-coverage selection of queries over related-triple sets.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingProvider;
use crate::kb::{KnowledgeBase, Triple};
use crate::retrieval::{collect_candidates, prune_candidates, top_k_triples, RetrievalError};

#[derive(Debug, Error, PartialEq)]
pub enum CoverageError {
    #[error("invalid coverage config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Retrieval(#[from] RetrievalErrorText),
}

/// Retrieval failure carried as text so the error stays comparable.
#[derive(Debug, Error, PartialEq)]
#[error("{0}")]
pub struct RetrievalErrorText(pub String);

impl From<RetrievalError> for CoverageError {
    fn from(e: RetrievalError) -> Self {
        CoverageError::Retrieval(RetrievalErrorText(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageConfig {
    /// Seed triples per query.
    pub k: usize,
    /// Cap on neighbor triples added to the seed.
    pub m: usize,
    /// Maximum number of selected queries.
    pub budget: usize,
    /// Target covered fraction of the candidate union.
    pub rho: f64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig { k: 10, m: 500, budget: 1000, rho: 0.8 }
    }
}

impl CoverageConfig {
    /// Settings for conversational-memory corpora: full coverage.
    pub fn locomo() -> Self {
        CoverageConfig { m: 100, rho: 1.0, ..Self::default() }
    }

    /// Settings for large open-domain corpora.
    pub fn large_corpus() -> Self {
        CoverageConfig { m: 500, rho: 0.8, ..Self::default() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "locomo" => Some(Self::locomo()),
            "large" | "large_corpus" => Some(Self::large_corpus()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), CoverageError> {
        if self.k == 0 {
            return Err(CoverageError::InvalidConfig("k must be at least 1"));
        }
        if self.budget == 0 {
            return Err(CoverageError::InvalidConfig("budget must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(CoverageError::InvalidConfig("rho must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub type TripleKey = (String, String, String);

pub fn triple_key(t: &Triple) -> TripleKey {
    (t.head.clone(), t.relation.clone(), t.tail.clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryCoverage<E = TripleKey> {
    pub query_id: String,
    pub elements: BTreeSet<E>,
}

impl<E: Ord> QueryCoverage<E> {
    pub fn new(query_id: impl Into<String>, elements: impl IntoIterator<Item = E>) -> Self {
        QueryCoverage { query_id: query_id.into(), elements: elements.into_iter().collect() }
    }
}

/// Top-`k` triples for the query plus up to `m` of their one-hop neighbor
/// triples, the most query-similar kept.
pub fn coverage_set(
    query_id: &str,
    query: &str,
    kb: &KnowledgeBase,
    cfg: &CoverageConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<QueryCoverage, CoverageError> {
    cfg.validate()?;
    let seed = top_k_triples(query_id, query, kb, cfg.k, provider)?;
    let mut elements: BTreeSet<TripleKey> = seed.triples().map(triple_key).collect();
    if cfg.m > 0 {
        let extra = prune_candidates(query, collect_candidates(kb, &seed), cfg.m, provider)?;
        elements.extend(extra.iter().map(|s| triple_key(&s.triple)));
    }
    Ok(QueryCoverage { query_id: query_id.to_string(), elements })
}

/// One row of the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub query_id: String,
    pub rank: usize,
    pub new_elements: usize,
    pub cumulative_fraction: f64,
}

fn union_size<E: Ord>(covs: &[QueryCoverage<E>]) -> usize {
    covs.iter().flat_map(|c| &c.elements).collect::<BTreeSet<_>>().len()
}

fn fraction(covered: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    }
}

/// Greedy max coverage with lazy gain re-evaluation. Stops at the budget,
/// once the covered fraction reaches `rho`, or when no query adds anything.
/// Equal gains go to the smaller query id.
pub fn greedy_select<E: Ord + Clone>(covs: &[QueryCoverage<E>], cfg: &CoverageConfig) -> Vec<Selection> {
    let total = union_size(covs);
    let mut covered: BTreeSet<&E> = BTreeSet::new();
    let mut out = Vec::new();
    // (gain bound, smaller id first, index, round the bound was computed)
    let mut heap: BinaryHeap<(usize, Reverse<&str>, Reverse<usize>, usize)> = covs
        .iter()
        .enumerate()
        .map(|(i, c)| (c.elements.len(), Reverse(c.query_id.as_str()), Reverse(i), 0))
        .collect();
    let mut round = 0;
    while out.len() < cfg.budget && fraction(covered.len(), total) < cfg.rho {
        let Some((bound, id, idx, stamp)) = heap.pop() else { break };
        if stamp != round {
            let gain = covs[idx.0].elements.iter().filter(|e| !covered.contains(e)).count();
            debug_assert!(gain <= bound);
            heap.push((gain, id, idx, round));
            continue;
        }
        if bound == 0 {
            break;
        }
        covered.extend(covs[idx.0].elements.iter());
        round += 1;
        out.push(Selection {
            query_id: id.0.to_string(),
            rank: out.len(),
            new_elements: bound,
            cumulative_fraction: fraction(covered.len(), total),
        });
    }
    tracing::debug!(selected = out.len(), total, "coverage selection finished");
    out
}

/// Covered fraction of the union achieved by the selected query ids.
pub fn coverage_fraction<E: Ord>(selected: &[&str], covs: &[QueryCoverage<E>]) -> f64 {
    let chosen: BTreeSet<&str> = selected.iter().copied().collect();
    let covered = covs
        .iter()
        .filter(|c| chosen.contains(c.query_id.as_str()))
        .flat_map(|c| &c.elements)
        .collect::<BTreeSet<_>>()
        .len();
    fraction(covered, union_size(covs))
}
