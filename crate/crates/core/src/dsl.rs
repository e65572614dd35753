//! The refinement-action language: `insert_edge`, `delete_edge` and
//! `replace_node` calls separated by `|`.
//!
//! Arguments may be quoted with `"..."`, `` `...' ``, `'...'` or typographic
//! quotes. A quote character only closes an argument when the next
//! non-blank character is `,` or `)`, so apostrophes and parentheses inside
//! arguments survive (`` `the girl's phone number' ``).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{EditOutcome, KbError, KnowledgeBase, ReplaceMode, Triple};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {position}: {reason}")]
pub struct SyntaxError {
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    InsertEdge,
    DeleteEdge,
    ReplaceNode,
}

impl ActionKind {
    pub fn name(self) -> &'static str {
        match self {
            ActionKind::InsertEdge => "insert_edge",
            ActionKind::DeleteEdge => "delete_edge",
            ActionKind::ReplaceNode => "replace_node",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name {
            "insert_edge" => Some(ActionKind::InsertEdge),
            "delete_edge" => Some(ActionKind::DeleteEdge),
            "replace_node" => Some(ActionKind::ReplaceNode),
            _ => None,
        }
    }

    fn arity(self) -> usize {
        match self {
            ActionKind::ReplaceNode => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefinementAction {
    InsertEdge(Triple),
    DeleteEdge(Triple),
    ReplaceNode { old: String, new: String },
}

impl RefinementAction {
    pub fn kind(&self) -> ActionKind {
        match self {
            RefinementAction::InsertEdge(_) => ActionKind::InsertEdge,
            RefinementAction::DeleteEdge(_) => ActionKind::DeleteEdge,
            RefinementAction::ReplaceNode { .. } => ActionKind::ReplaceNode,
        }
    }

    pub fn replace(old: impl AsRef<str>, new: impl AsRef<str>) -> Result<Self, String> {
        let (old, new) = (old.as_ref().trim(), new.as_ref().trim());
        if old.is_empty() || new.is_empty() {
            return Err("replace_node arguments must be non-empty".into());
        }
        if old == new {
            return Err("replace_node old and new items are identical".into());
        }
        Ok(RefinementAction::ReplaceNode { old: old.to_string(), new: new.to_string() })
    }

    /// The action that undoes this one on a KB where it was `Applied`.
    pub fn inverse(&self) -> RefinementAction {
        match self {
            RefinementAction::InsertEdge(t) => RefinementAction::DeleteEdge(t.clone()),
            RefinementAction::DeleteEdge(t) => RefinementAction::InsertEdge(t.clone()),
            RefinementAction::ReplaceNode { old, new } => {
                RefinementAction::ReplaceNode { old: new.clone(), new: old.clone() }
            }
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

impl fmt::Display for RefinementAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefinementAction::InsertEdge(t) | RefinementAction::DeleteEdge(t) => write!(
                f,
                "{}({}, {}, {})",
                self.kind().name(),
                quote(&t.head),
                quote(&t.relation),
                quote(&t.tail)
            ),
            RefinementAction::ReplaceNode { old, new } => {
                write!(f, "replace_node({}, {})", quote(old), quote(new))
            }
        }
    }
}

/// Canonical text: double-quoted arguments joined by a single `|`.
pub fn render_actions(actions: &[RefinementAction]) -> String {
    actions.iter().map(ToString::to_string).collect::<Vec<_>>().join("|")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QuoteStyle {
    Double,
    Backtick,
    Single,
    CurlySingle,
    CurlyDouble,
}

impl QuoteStyle {
    fn from_opener(c: char) -> Option<Self> {
        match c {
            '"' => Some(QuoteStyle::Double),
            '`' => Some(QuoteStyle::Backtick),
            '\'' => Some(QuoteStyle::Single),
            '\u{2018}' => Some(QuoteStyle::CurlySingle),
            '\u{201c}' => Some(QuoteStyle::CurlyDouble),
            _ => None,
        }
    }

    fn closes(self, c: char) -> bool {
        match self {
            QuoteStyle::Double => c == '"',
            QuoteStyle::Backtick => c == '\'' || c == '`' || c == '\u{2019}',
            QuoteStyle::Single => c == '\'',
            QuoteStyle::CurlySingle => c == '\u{2019}' || c == '\'',
            QuoteStyle::CurlyDouble => c == '\u{201d}' || c == '"',
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Reject batches that mix quote styles.
    pub strict_quotes: bool,
}

pub fn parse_actions(content: &str) -> Result<Vec<RefinementAction>, SyntaxError> {
    parse_actions_with(content, ParseOptions::default())
}

pub fn parse_actions_with(content: &str, opts: ParseOptions) -> Result<Vec<RefinementAction>, SyntaxError> {
    Parser { src: content, pos: 0, opts, style: None }.actions()
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    opts: ParseOptions,
    style: Option<QuoteStyle>,
}

impl Parser<'_> {
    fn err<T>(&self, position: usize, reason: impl Into<String>) -> Result<T, SyntaxError> {
        Err(SyntaxError { position, reason: reason.into() })
    }

    fn rest(&self) -> &str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn expect(&mut self, want: char, what: &str) -> Result<(), SyntaxError> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            Some(c) => self.err(self.pos, format!("expected {what}, found {c:?}")),
            None => self.err(self.pos, format!("expected {what}, found end of input")),
        }
    }

    fn actions(mut self) -> Result<Vec<RefinementAction>, SyntaxError> {
        let mut out = Vec::new();
        self.skip_ws();
        while self.peek().is_some() {
            out.push(self.call()?);
            self.skip_ws();
            match self.peek() {
                None => break,
                Some('|') => {
                    self.bump();
                    self.skip_ws();
                }
                Some(c) => return self.err(self.pos, format!("expected '|' between actions, found {c:?}")),
            }
        }
        Ok(out)
    }

    fn call(&mut self) -> Result<RefinementAction, SyntaxError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.bump();
        }
        let name = &self.src[start..self.pos];
        if name.is_empty() {
            return self.err(start, "expected an action name");
        }
        let Some(kind) = ActionKind::from_name(name) else {
            return self.err(start, format!("unknown operator `{name}`"));
        };
        self.expect('(', "'('")?;
        let mut args = Vec::new();
        self.skip_ws();
        if self.peek() == Some(')') {
            self.bump();
        } else {
            loop {
                args.push(self.argument()?);
                self.skip_ws();
                match self.bump() {
                    Some(',') => continue,
                    Some(')') => break,
                    Some(c) => return self.err(self.pos - c.len_utf8(), format!("expected ',' or ')', found {c:?}")),
                    None => return self.err(self.pos, "unbalanced parentheses"),
                }
            }
        }
        if args.len() != kind.arity() {
            return self.err(
                start,
                format!("wrong arity: {} takes {} arguments, got {}", name, kind.arity(), args.len()),
            );
        }
        let action = match kind {
            ActionKind::ReplaceNode => RefinementAction::replace(&args[0], &args[1]),
            _ => Triple::new(&args[0], &args[1], &args[2])
                .map(|t| {
                    if kind == ActionKind::InsertEdge {
                        RefinementAction::InsertEdge(t)
                    } else {
                        RefinementAction::DeleteEdge(t)
                    }
                })
                .map_err(|e| e.to_string()),
        };
        action.or_else(|reason| self.err(start, reason))
    }

    fn argument(&mut self) -> Result<String, SyntaxError> {
        self.skip_ws();
        let start = self.pos;
        let Some(style) = self.peek().and_then(QuoteStyle::from_opener) else {
            return match self.peek() {
                Some(c) => self.err(start, format!("expected a quoted argument, found {c:?}")),
                None => self.err(start, "expected a quoted argument, found end of input"),
            };
        };
        if self.opts.strict_quotes {
            match self.style {
                Some(seen) if seen != style => return self.err(start, "mixed quote styles"),
                _ => self.style = Some(style),
            }
        }
        self.bump();
        let mut value = String::new();
        loop {
            let Some(c) = self.bump() else {
                return self.err(start, "unbalanced quotes: argument is never closed");
            };
            if style == QuoteStyle::Double && c == '\\' {
                match self.peek() {
                    Some(next @ ('"' | '\\')) => {
                        self.bump();
                        value.push(next);
                    }
                    _ => value.push('\\'),
                }
                continue;
            }
            if style.closes(c) {
                let after = self.rest().trim_start();
                if after.starts_with(',') || after.starts_with(')') {
                    break;
                }
            }
            value.push(c);
        }
        let trimmed = value.trim();
        if trimmed.is_empty() {
            return self.err(start, "empty argument");
        }
        Ok(trimmed.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    AbsentTriple,
    AbsentItem,
    Duplicate,
    ConflictOrdering,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationWarning {
    pub index: usize,
    pub kind: WarningKind,
    pub message: String,
}

/// Dry-runs the batch against a copy of `kb` and reports suspicious actions.
pub fn validate_actions(actions: &[RefinementAction], kb: &KnowledgeBase) -> Vec<ValidationWarning> {
    let mut sim = kb.snapshot();
    let mut touched: BTreeMap<&Triple, ActionKind> = BTreeMap::new();
    let mut out = Vec::new();
    for (index, action) in actions.iter().enumerate() {
        let mut warn = |kind, message: String| out.push(ValidationWarning { index, kind, message });
        match action {
            RefinementAction::InsertEdge(t) | RefinementAction::DeleteEdge(t) => {
                let kind = action.kind();
                if let Some(prev) = touched.insert(t, kind) {
                    if prev != kind {
                        warn(
                            WarningKind::ConflictOrdering,
                            format!("{} after {} of {t}; the later action wins", kind.name(), prev.name()),
                        );
                    }
                }
                if kind == ActionKind::InsertEdge {
                    if matches!(sim.insert_triple(t.clone()), Ok(EditOutcome::NoOpDuplicate)) {
                        warn(WarningKind::Duplicate, format!("{t} already present"));
                    }
                } else if sim.delete_triple(t) == EditOutcome::NoOpMissing {
                    warn(WarningKind::AbsentTriple, format!("{t} not present"));
                }
            }
            RefinementAction::ReplaceNode { old, new } => {
                if sim.replace_item(old, new, ReplaceMode::Lenient).ok() == Some(EditOutcome::NoOpMissing) {
                    warn(WarningKind::AbsentItem, format!("item `{old}` not present"));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApplyOptions {
    pub max_actions: usize,
    pub replace_mode: ReplaceMode,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        ApplyOptions { max_actions: 64, replace_mode: ReplaceMode::Lenient }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ActionOutcome {
    Applied,
    NoOpDuplicate,
    NoOpMissing,
    Failed { reason: String },
}

impl From<EditOutcome> for ActionOutcome {
    fn from(o: EditOutcome) -> Self {
        match o {
            EditOutcome::Applied => ActionOutcome::Applied,
            EditOutcome::NoOpDuplicate => ActionOutcome::NoOpDuplicate,
            EditOutcome::NoOpMissing => ActionOutcome::NoOpMissing,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub actions: Vec<String>,
    pub outcomes: Vec<ActionOutcome>,
    pub counts: BTreeMap<ActionKind, usize>,
    pub kb_revision_before: u64,
    pub kb_revision_after: u64,
}

impl ApplyReport {
    pub fn applied(&self) -> usize {
        self.outcomes.iter().filter(|o| **o == ActionOutcome::Applied).count()
    }
}

#[derive(Debug, Error)]
pub enum ApplyError {
    #[error("batch aborted at action {index}: {reason}")]
    BatchAborted { index: usize, reason: String, report: Box<ApplyReport> },
}

/// Applies the batch left to right on a copy of `kb`. No-ops never abort;
/// a failing action discards the whole batch.
pub fn apply_actions(
    kb: &KnowledgeBase,
    actions: &[RefinementAction],
    opts: &ApplyOptions,
) -> Result<(KnowledgeBase, ApplyReport), ApplyError> {
    let mut report = ApplyReport {
        actions: actions.iter().map(ToString::to_string).collect(),
        kb_revision_before: kb.revision(),
        kb_revision_after: kb.revision(),
        ..ApplyReport::default()
    };
    if actions.len() > opts.max_actions {
        return Err(ApplyError::BatchAborted {
            index: opts.max_actions,
            reason: format!("batch of {} actions exceeds the cap of {}", actions.len(), opts.max_actions),
            report: Box::new(report),
        });
    }
    let mut next = kb.snapshot();
    for (index, action) in actions.iter().enumerate() {
        *report.counts.entry(action.kind()).or_insert(0) += 1;
        let result: Result<EditOutcome, KbError> = match action {
            RefinementAction::InsertEdge(t) => next.insert_triple(t.clone()),
            RefinementAction::DeleteEdge(t) => Ok(next.delete_triple(t)),
            RefinementAction::ReplaceNode { old, new } => next.replace_item(old, new, opts.replace_mode),
        };
        match result {
            Ok(o) => report.outcomes.push(o.into()),
            Err(e) => {
                let reason = e.to_string();
                report.outcomes.push(ActionOutcome::Failed { reason: reason.clone() });
                return Err(ApplyError::BatchAborted { index, reason, report: Box::new(report) });
            }
        }
    }
    report.kb_revision_after = next.revision();
    Ok((next, report))
}
