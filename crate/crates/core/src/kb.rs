//! Triple knowledge base with atomic edit operators and JSONL persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("invalid triple: {0} is empty")]
    InvalidTriple(&'static str),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("replacement target equals source item `{0}`")]
    SameItem(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A `(head, relation, tail)` fact. Identity ignores `source_id`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

impl Triple {
    /// Builds a triple with trimmed fields, rejecting empty ones.
    pub fn new(
        head: impl AsRef<str>,
        relation: impl AsRef<str>,
        tail: impl AsRef<str>,
    ) -> Result<Self, KbError> {
        let triple = Triple {
            head: head.as_ref().trim().to_string(),
            relation: relation.as_ref().trim().to_string(),
            tail: tail.as_ref().trim().to_string(),
            source_id: None,
        };
        triple.validate()?;
        Ok(triple)
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = Some(source_id.into());
        self
    }

    fn validate(&self) -> Result<(), KbError> {
        if self.head.is_empty() {
            return Err(KbError::InvalidTriple("head"));
        }
        if self.relation.is_empty() {
            return Err(KbError::InvalidTriple("relation"));
        }
        if self.tail.is_empty() {
            return Err(KbError::InvalidTriple("tail"));
        }
        Ok(())
    }

    fn canonicalized(mut self) -> Result<Self, KbError> {
        for field in [&mut self.head, &mut self.relation, &mut self.tail] {
            let trimmed = field.trim();
            if trimmed.len() != field.len() {
                *field = trimmed.to_string();
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn key(&self) -> (&str, &str, &str) {
        (&self.head, &self.relation, &self.tail)
    }

    pub fn touches(&self, item: &str) -> bool {
        self.head == item || self.tail == item
    }
}

impl PartialEq for Triple {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Triple {}

impl PartialOrd for Triple {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Triple {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl std::hash::Hash for Triple {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOutcome {
    Applied,
    NoOpDuplicate,
    NoOpMissing,
}

/// How `replace_item` treats an item that is not in the store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceMode {
    #[default]
    Lenient,
    Strict,
}

/// The triple store. Items and relations are reference-counted so the derived
/// sets stay exact under every edit.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    triples: BTreeSet<Triple>,
    items: BTreeMap<String, usize>,
    relations: BTreeMap<String, usize>,
    revision: u64,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.triples == other.triples
    }
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Result<Self, KbError> {
        let mut kb = Self::new();
        for t in triples {
            kb.insert_triple(t)?;
        }
        kb.revision = 0;
        Ok(kb)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn triples(&self) -> impl ExactSizeIterator<Item = &Triple> + Clone {
        self.triples.iter()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    pub fn has_item(&self, item: &str) -> bool {
        self.items.contains_key(item)
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.relations.keys().map(String::as_str)
    }

    /// An independent copy; later edits to `self` do not affect it.
    pub fn snapshot(&self) -> KnowledgeBase {
        self.clone()
    }

    pub fn insert_triple(&mut self, t: Triple) -> Result<EditOutcome, KbError> {
        let t = t.canonicalized()?;
        if self.triples.contains(&t) {
            return Ok(EditOutcome::NoOpDuplicate);
        }
        bump(&mut self.items, &t.head);
        bump(&mut self.items, &t.tail);
        bump(&mut self.relations, &t.relation);
        self.triples.insert(t);
        self.revision += 1;
        Ok(EditOutcome::Applied)
    }

    pub fn delete_triple(&mut self, t: &Triple) -> EditOutcome {
        let Some(removed) = self.triples.take(t) else {
            return EditOutcome::NoOpMissing;
        };
        drop_ref(&mut self.items, &removed.head);
        drop_ref(&mut self.items, &removed.tail);
        drop_ref(&mut self.relations, &removed.relation);
        self.revision += 1;
        EditOutcome::Applied
    }

    /// Rewrites every occurrence of `old` as head or tail into `new`.
    /// Rewritten triples that collide with existing ones are merged.
    pub fn replace_item(
        &mut self,
        old: &str,
        new: &str,
        mode: ReplaceMode,
    ) -> Result<EditOutcome, KbError> {
        let old = old.trim();
        let new = new.trim();
        if new.is_empty() {
            return Err(KbError::InvalidTriple("replacement item"));
        }
        if old == new {
            return Err(KbError::SameItem(old.to_string()));
        }
        if !self.has_item(old) {
            return match mode {
                ReplaceMode::Lenient => Ok(EditOutcome::NoOpMissing),
                ReplaceMode::Strict => Err(KbError::UnknownItem(old.to_string())),
            };
        }
        let incident = self.neighbors(old);
        let revision = self.revision;
        for t in &incident {
            self.delete_triple(t);
        }
        for mut t in incident {
            if t.head == old {
                t.head = new.to_string();
            }
            if t.tail == old {
                t.tail = new.to_string();
            }
            self.insert_triple(t)?;
        }
        self.revision = revision + 1;
        Ok(EditOutcome::Applied)
    }

    /// Triples with `item` as head or tail.
    pub fn neighbors(&self, item: &str) -> Vec<Triple> {
        if !self.has_item(item) {
            return Vec::new();
        }
        self.triples.iter().filter(|t| t.touches(item)).cloned().collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let file = fs::File::open(path)?;
        Self::read_jsonl(BufReader::new(file))
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, KbError> {
        let mut kb = Self::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: String| KbError::Parse { line: idx + 1, reason };
            let t: Triple = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            kb.insert_triple(t).map_err(|e| parse_err(e.to_string()))?;
        }
        kb.revision = 0;
        Ok(kb)
    }

    /// Writes one JSON object per line, ordered by `(head, relation, tail)`.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), KbError> {
        for t in &self.triples {
            serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KbError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn bump(counts: &mut BTreeMap<String, usize>, key: &str) {
    *counts.entry(key.to_string()).or_insert(0) += 1;
}

fn drop_ref(counts: &mut BTreeMap<String, usize>, key: &str) {
    if let Some(n) = counts.get_mut(key) {
        *n -= 1;
        if *n == 0 {
            counts.remove(key);
        }
    }
}
