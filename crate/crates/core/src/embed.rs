//! Text embedding providers.
//!
//! Every provider returns unit-norm vectors of a fixed dimension. The
//! [`HashEmbedder`] is fully offline and deterministic; [`CachedEmbedder`]
//! memoizes any provider by exact text and can persist its cache as JSONL.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("embedding transport failed: {0}")]
    Transport(String),
    #[error("provider returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("provider returned a vector of dim {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding cache line {line}: {reason}")]
    Cache { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds a batch of texts. Batching never changes the per-text result.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError>;

    fn embed_one(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        let mut out = self.embed(&[text])?;
        out.pop().ok_or(ProviderError::CountMismatch { expected: 1, got: 0 })
    }
}

/// Dot product accumulated in `f64`. Equals cosine for unit-norm inputs.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, parts: &[&str]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(FNV_PRIME);
        }
        for b in part.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    // final avalanche (splitmix64 finalizer)
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Feature-hashing embedder over lowercase word unigrams, word bigrams and
/// character trigrams, each hashed into a signed bucket.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        HashEmbedder { dim, seed }
    }

    fn add(&self, v: &mut [f32], weight: f32, parts: &[&str]) {
        let h = fnv1a(self.seed, parts);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign * weight;
    }

    fn vector(&self, text: &str) -> Vec<f32> {
        let lowered = text.to_lowercase();
        let words: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let mut v = vec![0.0f32; self.dim];
        for w in &words {
            self.add(&mut v, 1.0, &["w", w]);
            let chars: Vec<char> = format!("#{w}#").chars().collect();
            for tri in chars.windows(3) {
                let s: String = tri.iter().collect();
                self.add(&mut v, 0.25, &["c", &s]);
            }
        }
        for pair in words.windows(2) {
            self.add(&mut v, 0.5, &["b", pair[0], pair[1]]);
        }
        let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            let idx = (fnv1a(self.seed, &["empty"]) % self.dim as u64) as usize;
            v[idx] = 1.0;
            return v;
        }
        v.iter().map(|x| (f64::from(*x) / norm) as f32).collect()
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(Self::DEFAULT_DIM, 0)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    text: String,
    vector: Vec<f32>,
}

/// Memoizing wrapper keyed by exact text.
pub struct CachedEmbedder<P> {
    inner: P,
    cache: RwLock<HashMap<String, Vec<f32>>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P) -> Self {
        CachedEmbedder { inner, cache: RwLock::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load_cache(&self, path: impl AsRef<Path>) -> Result<usize, ProviderError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut cache = self.cache.write().expect("cache lock poisoned");
        let mut n = 0;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CacheLine = serde_json::from_str(&line)
                .map_err(|e| ProviderError::Cache { line: idx + 1, reason: e.to_string() })?;
            if entry.vector.len() != self.inner.dim() {
                return Err(ProviderError::DimMismatch {
                    expected: self.inner.dim(),
                    got: entry.vector.len(),
                });
            }
            cache.insert(entry.text, entry.vector);
            n += 1;
        }
        Ok(n)
    }

    /// Persists the cache sorted by text so repeated saves are byte-stable.
    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<(), ProviderError> {
        let cache = self.cache.read().expect("cache lock poisoned");
        let mut keys: Vec<&String> = cache.keys().collect();
        keys.sort();
        let mut w = BufWriter::new(fs::File::create(path)?);
        for k in keys {
            let line = CacheLine { text: k.clone(), vector: cache[k].clone() };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let mut missing: Vec<&str> = {
            let cache = self.cache.read().expect("cache lock poisoned");
            texts.iter().copied().filter(|t| !cache.contains_key(*t)).collect()
        };
        missing.sort_unstable();
        missing.dedup();
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            if fresh.len() != missing.len() {
                return Err(ProviderError::CountMismatch { expected: missing.len(), got: fresh.len() });
            }
            let mut cache = self.cache.write().expect("cache lock poisoned");
            for (text, v) in missing.iter().zip(fresh) {
                cache.insert((*text).to_string(), v);
            }
        }
        let cache = self.cache.read().expect("cache lock poisoned");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
#[cfg(feature = "http")]
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
}

#[cfg(feature = "http")]
impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>, dim: usize) -> Self {
        HttpEmbedder { endpoint: endpoint.into(), model: model.into(), api_key, dim }
    }
}

#[cfg(feature = "http")]
impl EmbeddingProvider for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, ProviderError> {
        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f32>,
        }
        #[derive(Deserialize)]
        struct Response {
            data: Vec<Item>,
        }
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut req = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp: Response = req
            .send_json(&body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if resp.data.len() != texts.len() {
            return Err(ProviderError::CountMismatch { expected: texts.len(), got: resp.data.len() });
        }
        resp.data
            .into_iter()
            .map(|item| {
                if item.embedding.len() != self.dim {
                    return Err(ProviderError::DimMismatch { expected: self.dim, got: item.embedding.len() });
                }
                let norm = item.embedding.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
                Ok(if norm > 0.0 {
                    item.embedding.iter().map(|x| (f64::from(*x) / norm) as f32).collect()
                } else {
                    item.embedding
                })
            })
            .collect()
    }
}
