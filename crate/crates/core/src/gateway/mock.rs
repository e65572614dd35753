//! Offline chat clients: fixture replay, closures, recording, retry, and two
//! deterministic stand-ins for the reader and answer-judge roles.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::prompts::{field_value, parse_rendered_triple};
use super::{ChatClient, ChatRequest, GatewayError, Role};
use crate::reward::normalize_tokens;

/// One line of a mock fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub role_name: Role,
    pub user_digest: String,
    pub response: String,
}

/// Replays responses keyed by `(role, digest(user))`; any other request fails.
#[derive(Debug, Default, Clone)]
pub struct ScriptedMock {
    table: HashMap<(Role, String), String>,
}

impl ScriptedMock {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        ScriptedMock {
            table: entries
                .into_iter()
                .map(|e| ((e.role_name, e.user_digest), e.response))
                .collect(),
        }
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, GatewayError> {
        let mut entries = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Fixture { line: idx + 1, reason: e.to_string() })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Self::from_jsonl(BufReader::new(fs::File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl ChatClient for ScriptedMock {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let digest = req.user_digest();
        self.table
            .get(&(req.role, digest.clone()))
            .cloned()
            .ok_or(GatewayError::MockMissFixture { role: req.role, digest })
    }
}

/// Wraps a closure as a client.
pub struct FnClient<F>(F);

impl<F> FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        FnClient(f)
    }
}

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        (self.0)(req)
    }
}

/// Retries transport failures up to `retries` extra attempts.
pub struct RetryingClient<C> {
    inner: C,
    retries: usize,
}

impl<C: ChatClient> RetryingClient<C> {
    pub fn new(inner: C, retries: usize) -> Self {
        RetryingClient { inner, retries }
    }
}

impl<C: ChatClient> ChatClient for RetryingClient<C> {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let mut attempt = 0;
        loop {
            match self.inner.complete(req) {
                Err(GatewayError::Transport(msg)) if attempt < self.retries => {
                    attempt += 1;
                    tracing::debug!(attempt, error = %msg, role = %req.role, "retrying chat request");
                }
                other => return other,
            }
        }
    }
}

/// Forwards to `inner` and records every successful exchange as a fixture.
pub struct RecordingClient<C> {
    inner: C,
    log: Mutex<BTreeMap<(Role, String), String>>,
}

impl<C: ChatClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        RecordingClient { inner, log: Mutex::new(BTreeMap::new()) }
    }

    /// Recorded fixtures ordered by role then digest.
    pub fn fixtures(&self) -> Vec<FixtureEntry> {
        self.log
            .lock()
            .expect("recording lock poisoned")
            .iter()
            .map(|((role, digest), response)| FixtureEntry {
                role_name: *role,
                user_digest: digest.clone(),
                response: response.clone(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), GatewayError> {
        for entry in self.fixtures() {
            serde_json::to_writer(&mut w, &entry).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl<C: ChatClient> ChatClient for RecordingClient<C> {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let response = self.inner.complete(req)?;
        let mut log = self.log.lock().expect("recording lock poisoned");
        let key = (req.role, req.user_digest());
        if let Some(prev) = log.get(&key) {
            if prev != &response {
                tracing::warn!(role = %req.role, "identical request produced a different response; keeping the first");
            }
        } else {
            log.insert(key, response.clone());
        }
        Ok(response)
    }
}

const READER_STOPWORDS: &[&str] = &[
    "of", "in", "on", "at", "to", "for", "by", "is", "was", "were", "are", "what", "who", "which",
    "whose", "when", "where", "how", "did", "does", "do", "with", "and", "or", "as", "from",
];

fn content_tokens(text: &str) -> BTreeSet<String> {
    normalize_tokens(text)
        .into_iter()
        .filter(|t| !READER_STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Deterministic reader over the reader prompt: answers with the far end of
/// the context triple whose other two fields best overlap the question.
/// Ties go to the earlier (higher ranked) triple. Replies `unknown` when no
/// triple shares a content word with the question.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExtractiveReader;

impl ExtractiveReader {
    pub fn answer(question: &str, triples: &[(String, String, String)]) -> String {
        let q = content_tokens(question);
        let mut best: Option<(usize, &str)> = None;
        for (h, r, t) in triples {
            let rel = content_tokens(r);
            let forward: BTreeSet<String> = content_tokens(h).union(&rel).cloned().collect();
            let backward: BTreeSet<String> = content_tokens(t).union(&rel).cloned().collect();
            for (score, answer) in [
                (q.intersection(&forward).count(), t.as_str()),
                (q.intersection(&backward).count(), h.as_str()),
            ] {
                if score > 0 && best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, answer));
                }
            }
        }
        best.map_or_else(|| "unknown".to_string(), |(_, a)| a.to_string())
    }
}

impl ChatClient for ExtractiveReader {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let question = field_value(&req.user, "Question:").unwrap_or_default();
        let context = req
            .user
            .split_once("Knowledge Graph (KG) context: ")
            .map(|(_, c)| c)
            .unwrap_or_default();
        let triples: Vec<_> = context.split(",\n").filter_map(parse_rendered_triple).collect();
        Ok(Self::answer(question, &triples))
    }
}

/// Answer judge that says Yes iff the normalized prediction equals a
/// normalized golden answer.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExactMatchJudge;

impl ChatClient for ExactMatchJudge {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let golds: Vec<String> = field_value(&req.user, "Golden answers:")
            .and_then(|g| serde_json::from_str(g).ok())
            .ok_or_else(|| GatewayError::Transport("answer judge prompt lacks golden answers".into()))?;
        let pred = normalize_tokens(field_value(&req.user, "Predicted answer:").unwrap_or_default());
        let hit = !pred.is_empty() && golds.iter().any(|g| normalize_tokens(g) == pred);
        Ok(format!("<judge>{}</judge>", if hit { "Yes" } else { "No" }))
    }
}
