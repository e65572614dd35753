//! Model-call contract shared by the refiner, reader and answer judge.
//!
//! Requests are rendered from fixed templates, routed by [`Role`] to a
//! [`ChatClient`], and answers are pulled out of `<tag>...</tag>` blocks.

mod mock;
pub mod prompts;

#[cfg(feature = "http")]
mod http;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pipeline::{InteractionHistory, IssueReport};
use crate::retrieval::Subgraph;

#[cfg(feature = "http")]
pub use http::HttpChatClient;
pub use mock::{
    ExactMatchJudge, ExtractiveReader, FixtureEntry, FnClient, RecordingClient, RetryingClient,
    ScriptedMock,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no <{0}> tag in model output")]
    MissingTag(Tag),
    #[error("<{0}> tag is never closed")]
    UnclosedTag(Tag),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no fixture for role {role} with user digest {digest}")]
    MockMissFixture { role: Role, digest: String },
    #[error("judgement must be Yes or No, got {0:?}")]
    JudgeParse(String),
    #[error("interaction history is empty")]
    EmptyHistory,
    #[error("no client configured for role {0}")]
    NoRoute(Role),
    #[error("fixture line {line}: {reason}")]
    Fixture { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The model roles the pipeline talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    RefinerJudge,
    RefinerAbduction,
    RefinerActions,
    AnswerJudge,
    Reader,
    Corruptor,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::RefinerJudge,
        Role::RefinerAbduction,
        Role::RefinerActions,
        Role::AnswerJudge,
        Role::Reader,
        Role::Corruptor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::RefinerJudge => "refiner_judge",
            Role::RefinerAbduction => "refiner_abduction",
            Role::RefinerActions => "refiner_actions",
            Role::AnswerJudge => "answer_judge",
            Role::Reader => "reader",
            Role::Corruptor => "corruptor",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { temperature: 0.0, max_tokens: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub role: Role,
    pub system: String,
    pub user: String,
    pub params: DecodeParams,
}

impl ChatRequest {
    pub fn new(role: Role, system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest { role, system: system.into(), user: user.into(), params: DecodeParams::default() }
    }

    /// Stable key for fixture lookup: hex SHA-256 of the user text.
    pub fn user_digest(&self) -> String {
        digest(&self.user)
    }
}

pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Judge,
    Abduction,
    Refinement,
}

impl Tag {
    pub fn name(self) -> &'static str {
        match self {
            Tag::Judge => "judge",
            Tag::Abduction => "abduction",
            Tag::Refinement => "refinement",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedOutput {
    pub tag: Tag,
    pub content: String,
    pub raw: String,
    /// Further well-formed pairs of the same tag after the first, which are ignored.
    pub ignored_pairs: usize,
}

/// Content strictly between the first `<tag>` and the next `</tag>`.
pub fn extract_tagged(raw: &str, tag: Tag) -> Result<TaggedOutput, GatewayError> {
    let open = format!("<{}>", tag.name());
    let close = format!("</{}>", tag.name());
    let start = raw.find(&open).ok_or(GatewayError::MissingTag(tag))? + open.len();
    let len = raw[start..].find(&close).ok_or(GatewayError::UnclosedTag(tag))?;
    let mut ignored_pairs = 0;
    let mut rest = &raw[start + len + close.len()..];
    while let Some(o) = rest.find(&open) {
        let after = &rest[o + open.len()..];
        match after.find(&close) {
            Some(c) => {
                ignored_pairs += 1;
                rest = &after[c + close.len()..];
            }
            None => break,
        }
    }
    if ignored_pairs > 0 {
        tracing::warn!(tag = tag.name(), ignored_pairs, "multiple tag pairs in model output; using the first");
    }
    Ok(TaggedOutput {
        tag,
        content: raw[start..start + len].to_string(),
        raw: raw.to_string(),
        ignored_pairs,
    })
}

/// `Yes`/`No`, case-insensitive and trimmed.
pub fn parse_judgement(content: &str) -> Result<bool, GatewayError> {
    let c = content.trim();
    if c.eq_ignore_ascii_case("yes") {
        Ok(true)
    } else if c.eq_ignore_ascii_case("no") {
        Ok(false)
    } else {
        Err(GatewayError::JudgeParse(c.to_string()))
    }
}

pub fn render_judge_prompt(question: &str, sg: &Subgraph) -> ChatRequest {
    let triples = prompts::render_triples(sg.triples());
    let user = prompts::fill(prompts::JUDGE_USER, &[("question", question), ("triples_string", &triples)]);
    ChatRequest::new(Role::RefinerJudge, prompts::JUDGE_SYSTEM.trim_end(), user)
}

/// Serializes the last `history.horizon` records as numbered steps.
pub fn render_abduction_prompt(history: &InteractionHistory) -> Result<ChatRequest, GatewayError> {
    let window = history.window();
    if window.is_empty() {
        return Err(GatewayError::EmptyHistory);
    }
    let steps: Vec<String> = window
        .iter()
        .map(|rec| {
            format!(
                "Step {}\nQuestion: {}\nTriples: {}\nJudgement: {}",
                rec.hop,
                history.question,
                prompts::render_triples(rec.subgraph.triples()),
                if rec.answerable { "Yes" } else { "No" }
            )
        })
        .collect();
    let serialized = format!("\n{}", steps.join("\n\n"));
    let user = prompts::fill(prompts::ABDUCTION_USER, &[("interaction_history", &serialized)]);
    Ok(ChatRequest::new(Role::RefinerAbduction, prompts::ABDUCTION_SYSTEM.trim_end(), user))
}

pub fn render_actions_prompt(
    original_text: Option<&str>,
    sg: &Subgraph,
    question: &str,
    issues: &IssueReport,
) -> ChatRequest {
    let triples = prompts::render_triples(sg.triples());
    let original = original_text
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .unwrap_or(prompts::UNAVAILABLE);
    let user = prompts::fill(
        prompts::ACTIONS_USER,
        &[
            ("original_text", original),
            ("triples_string", &triples),
            ("question", question),
            ("error_reasons", issues.text.trim()),
        ],
    );
    ChatRequest::new(Role::RefinerActions, prompts::ACTIONS_SYSTEM.trim_end(), user)
}

pub fn render_reader_prompt(question: &str, sg: &Subgraph) -> ChatRequest {
    let triples = prompts::render_triples(sg.triples());
    let user = prompts::fill(prompts::READER_USER, &[("question", question), ("triples_string", &triples)]);
    ChatRequest::new(Role::Reader, prompts::READER_SYSTEM.trim_end(), user)
}

pub fn render_answer_judge_prompt(question: &str, golds: &[String], prediction: &str) -> ChatRequest {
    let golds = serde_json::to_string(golds).expect("string list serializes");
    let user = prompts::fill(
        prompts::ANSWER_JUDGE_USER,
        &[("question", question), ("golden_answers", &golds), ("prediction", prediction.trim())],
    );
    ChatRequest::new(Role::AnswerJudge, prompts::ANSWER_JUDGE_SYSTEM.trim_end(), user)
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError>;
}

impl<C: ChatClient + ?Sized> ChatClient for Arc<C> {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(req)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        (**self).complete(req)
    }
}

/// Routes each request to the client configured for its role.
#[derive(Clone, Default)]
pub struct Gateway {
    routes: BTreeMap<Role, Arc<dyn ChatClient>>,
    fallback: Option<Arc<dyn ChatClient>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("routes", &self.routes.keys().collect::<Vec<_>>())
            .field("fallback", &self.fallback.is_some())
            .finish()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every role goes to `client`.
    pub fn uniform(client: impl ChatClient + 'static) -> Self {
        Gateway { routes: BTreeMap::new(), fallback: Some(Arc::new(client)) }
    }

    pub fn route(mut self, role: Role, client: impl ChatClient + 'static) -> Self {
        self.routes.insert(role, Arc::new(client));
        self
    }

    pub fn route_shared(mut self, role: Role, client: Arc<dyn ChatClient>) -> Self {
        self.routes.insert(role, client);
        self
    }

    pub fn with_fallback(mut self, client: Arc<dyn ChatClient>) -> Self {
        self.fallback = Some(client);
        self
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let client = self
            .routes
            .get(&req.role)
            .or(self.fallback.as_ref())
            .ok_or(GatewayError::NoRoute(req.role))?;
        client.complete(req)
    }
}
