//! Dense retrieval over triples and query-conditioned subgraph expansion.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, EmbeddingProvider, ProviderError};
use crate::kb::{KnowledgeBase, Triple};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("subgraph already at hop {hop}, maximum is {max_hops}")]
    MaxHopsExceeded { hop: usize, max_hops: usize },
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Seed size of the hop-0 subgraph.
    pub n: usize,
    /// Cap on triples added per expansion.
    pub m: usize,
    pub max_hops: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { n: 5, m: 10, max_hops: 2 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.n == 0 {
            return Err(RetrievalError::InvalidConfig("n must be at least 1"));
        }
        if self.m == 0 {
            return Err(RetrievalError::InvalidConfig("m must be at least 1"));
        }
        Ok(())
    }
}

/// Serialization used to embed a triple: `head | relation | tail`.
pub fn triple_text(t: &Triple) -> String {
    format!("{} | {} | {}", t.head, t.relation, t.tail)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTriple {
    pub triple: Triple,
    pub score: f64,
}

/// Descending score, then ascending `(head, relation, tail)`.
pub fn rank_order(a: &ScoredTriple, b: &ScoredTriple) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.triple.cmp(&b.triple))
}

/// A query's retrieved region of the KB at a given expansion hop.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub query_id: String,
    pub hop: usize,
    entries: Vec<ScoredTriple>,
}

impl Subgraph {
    pub fn new(query_id: impl Into<String>, hop: usize, entries: Vec<ScoredTriple>) -> Self {
        Subgraph { query_id: query_id.into(), hop, entries }
    }

    pub fn empty(query_id: impl Into<String>) -> Self {
        Self::new(query_id, 0, Vec::new())
    }

    pub fn entries(&self) -> &[ScoredTriple] {
        &self.entries
    }

    pub fn triples(&self) -> impl ExactSizeIterator<Item = &Triple> {
        self.entries.iter().map(|e| &e.triple)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.entries.iter().any(|e| &e.triple == t)
    }

    pub fn triple_set(&self) -> BTreeSet<&Triple> {
        self.triples().collect()
    }

    pub fn items(&self) -> BTreeSet<&str> {
        self.triples()
            .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
            .collect()
    }
}

/// Scores `triples` against the query and returns the best `k` in rank order.
fn select_top(
    query: &str,
    triples: Vec<Triple>,
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredTriple>, RetrievalError> {
    if triples.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let q = provider.embed_one(query)?;
    let texts: Vec<String> = triples.iter().map(triple_text).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = provider.embed(&refs)?;
    if vectors.len() != triples.len() {
        return Err(ProviderError::CountMismatch { expected: triples.len(), got: vectors.len() }.into());
    }
    let mut scored: Vec<ScoredTriple> = triples
        .into_iter()
        .zip(vectors)
        .map(|(triple, v)| ScoredTriple { score: cosine(&q, &v), triple })
        .collect();
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(scored)
}

/// Hop-0 subgraph: the `n` triples most similar to the query.
pub fn top_k_triples(
    query_id: &str,
    query: &str,
    kb: &KnowledgeBase,
    n: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Subgraph, RetrievalError> {
    if n == 0 {
        return Err(RetrievalError::InvalidConfig("n must be at least 1"));
    }
    let entries = select_top(query, kb.triples().cloned().collect(), n, provider)?;
    Ok(Subgraph::new(query_id, 0, entries))
}

/// Triples of the KB touching an item of `sg` that are not already in `sg`.
pub fn collect_candidates(kb: &KnowledgeBase, sg: &Subgraph) -> Vec<Triple> {
    let members = sg.triple_set();
    let mut out = BTreeSet::new();
    for item in sg.items() {
        for t in kb.neighbors(item) {
            if !members.contains(&t) {
                out.insert(t);
            }
        }
    }
    out.into_iter().collect()
}

pub fn prune_candidates(
    query: &str,
    candidates: Vec<Triple>,
    m: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredTriple>, RetrievalError> {
    if m == 0 {
        return Err(RetrievalError::InvalidConfig("m must be at least 1"));
    }
    select_top(query, candidates, m, provider)
}

/// One expansion step: merge the top-`m` one-hop candidates into `sg`.
pub fn expand(
    query: &str,
    kb: &KnowledgeBase,
    sg: &Subgraph,
    cfg: &RetrievalConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Subgraph, RetrievalError> {
    if sg.hop >= cfg.max_hops {
        return Err(RetrievalError::MaxHopsExceeded { hop: sg.hop, max_hops: cfg.max_hops });
    }
    let pruned = prune_candidates(query, collect_candidates(kb, sg), cfg.m, provider)?;
    let mut entries = sg.entries.clone();
    entries.extend(pruned);
    Ok(Subgraph::new(sg.query_id.clone(), sg.hop + 1, entries))
}
