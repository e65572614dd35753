//! Prompt templates and rendering.
//!
//! The refiner's system prompts are versioned resource files; `{name}`
//! placeholders in user templates are substituted in a single pass so that
//! values containing braces are never re-expanded.

use crate::kb::Triple;

pub const TEMPLATE_VERSION: &str = "1";

macro_rules! template {
    ($name:ident, $file:literal) => {
        pub const $name: &str = include_str!(concat!("../../resources/prompts/", $file));
    };
}

template!(JUDGE_SYSTEM, "judge_system.txt");
template!(JUDGE_USER, "judge_user.txt");
template!(ABDUCTION_SYSTEM, "abduction_system.txt");
template!(ABDUCTION_USER, "abduction_user.txt");
template!(ACTIONS_SYSTEM, "actions_system.txt");
template!(ACTIONS_USER, "actions_user.txt");
template!(READER_SYSTEM, "reader_system.txt");
template!(READER_USER, "reader_user.txt");
template!(ANSWER_JUDGE_SYSTEM, "answer_judge_system.txt");
template!(ANSWER_JUDGE_USER, "answer_judge_user.txt");
template!(CORRUPTOR_SYSTEM, "corruptor_system.txt");
template!(CORRUPTOR_USER, "corruptor_user.txt");

pub const EMPTY_LIST: &str = "(none)";
pub const UNAVAILABLE: &str = "(unavailable)";

/// Substitutes `{key}` placeholders. Unknown placeholders are left verbatim.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let template = template.trim_end();
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (close, *v))
        });
        match replaced {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// One triple in the prompt dialect: ``<`h',`r',`t'>``.
pub fn render_triple(t: &Triple) -> String {
    format!("<`{}',`{}',`{}'>", t.head, t.relation, t.tail)
}

pub fn render_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> String {
    let lines: Vec<String> = triples.into_iter().map(render_triple).collect();
    if lines.is_empty() {
        EMPTY_LIST.to_string()
    } else {
        lines.join(",\n")
    }
}

/// Inverse of [`render_triple`] for prompt lines; used by the offline mocks.
pub fn parse_rendered_triple(line: &str) -> Option<(String, String, String)> {
    let body = line.trim().trim_end_matches(',').strip_prefix("<`")?.strip_suffix("'>")?;
    let mut parts = body.splitn(3, "',`");
    let h = parts.next()?;
    let r = parts.next()?;
    let t = parts.next()?;
    Some((h.to_string(), r.to_string(), t.to_string()))
}

/// Returns the text after `label` on the first line that starts with it.
pub fn field_value<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(label)).map(str::trim)
}
