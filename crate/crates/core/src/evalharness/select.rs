use serde::{Deserialize, Serialize};

use super::BenchOption;
use crate::endpoint::{ChatMessage, ChatRequest, ClientError, CompletionClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    Guided,
    ExactKey,
    PunctuatedKey,
    LabelPrefix,
    /// Nothing matched; the first option was taken.
    Fallback,
}

impl Resolution {
    pub fn is_unresolved(self) -> bool {
        self == Resolution::Fallback
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub key: String,
    pub resolution: Resolution,
    pub raw: String,
}

const OPENERS: &[char] = &['(', '[', '{', '*', '_', '"', '\'', '`'];
const CLOSERS: &[char] = &[')', ']', '}', '.', ':', ',', ';', '*', '_', '"', '\'', '`', '!'];
const LEADS: &[&str] = &["the answer is", "the correct answer is", "answer:", "answer", "option", "choice"];

fn find_key<'o>(token: &str, options: &'o [BenchOption]) -> Option<&'o BenchOption> {
    options
        .iter()
        .find(|o| o.key == token)
        .or_else(|| {
            let mut ci = options.iter().filter(|o| o.key.eq_ignore_ascii_case(token));
            let first = ci.next()?;
            ci.next().is_none().then_some(first)
        })
}

fn punctuated_key<'o>(reply: &str, options: &'o [BenchOption]) -> Option<&'o BenchOption> {
    let mut s = reply.trim();
    let lower = s.to_ascii_lowercase();
    if let Some(lead) = LEADS.iter().find(|l| lower.starts_with(**l)) {
        s = s[lead.len()..].trim_start_matches([' ', ':']);
    }
    let s = s.trim_start_matches(OPENERS);
    let end = s.find(|c: char| !c.is_ascii_alphanumeric()).unwrap_or(s.len());
    let (token, rest) = s.split_at(end);
    if token.is_empty() {
        return None;
    }
    if !(rest.is_empty() || rest.starts_with(CLOSERS)) {
        return None;
    }
    find_key(token, options)
}

fn norm(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

fn label_prefix<'o>(reply: &str, options: &'o [BenchOption]) -> Option<&'o BenchOption> {
    let r = norm(reply);
    if r.is_empty() {
        return None;
    }
    let unique = |mut it: Box<dyn Iterator<Item = &'o BenchOption> + '_>| {
        let first = it.next()?;
        it.next().is_none().then_some(first)
    };
    unique(Box::new(options.iter().filter(|o| norm(&o.label) == r))).or_else(|| {
        unique(Box::new(options.iter().filter(|o| {
            let l = norm(&o.label);
            !l.is_empty() && (r.starts_with(&l) || l.starts_with(&r))
        })))
    })
}

/// Maps free text onto an option key: exact key, key wrapped in
/// punctuation, then a unique label-prefix match. Falls back to the first
/// option, flagged as unresolved.
pub fn resolve_reply(reply: &str, options: &[BenchOption]) -> (String, Resolution) {
    assert!(!options.is_empty(), "options must be non-empty");
    if let Some(o) = find_key(reply.trim(), options) {
        return (o.key.clone(), Resolution::ExactKey);
    }
    if let Some(o) = punctuated_key(reply, options) {
        return (o.key.clone(), Resolution::PunctuatedKey);
    }
    if let Some(o) = label_prefix(reply, options) {
        return (o.key.clone(), Resolution::LabelPrefix);
    }
    (options[0].key.clone(), Resolution::Fallback)
}

/// Asks the endpoint for one option key. Guided decoding is requested when
/// the endpoint supports it; any reply is then resolved onto the list, so the
/// returned key is always an option.
pub fn constrain_select(
    client: &CompletionClient,
    prompt: &str,
    options: &[BenchOption],
    max_tokens: u32,
) -> Result<Selection, ClientError> {
    let guided = client.supports_guided();
    let req = ChatRequest {
        model: client.model().to_string(),
        messages: vec![ChatMessage::user(prompt)],
        temperature: 0.0,
        max_tokens,
        guided_choice: guided.then(|| options.iter().map(|o| o.key.clone()).collect()),
    };
    let raw = client.complete(&req)?.content;
    if guided {
        if let Some(o) = options.iter().find(|o| o.key == raw.trim()) {
            return Ok(Selection {
                key: o.key.clone(),
                resolution: Resolution::Guided,
                raw,
            });
        }
    }
    let (key, resolution) = resolve_reply(&raw, options);
    Ok(Selection { key, resolution, raw })
}
