//! Deterministic offline endpoint used by `--mock-endpoint` runs and tests.
//!
//! Replies depend only on the request content: canned responses are matched
//! by substring of the user message, transformation prompts get a templated
//! answer built from the prompt itself, and multiple-choice prompts get an
//! option key chosen by hashing the prompt.

use crate::endpoint::{ChatEndpoint, ChatRequest, EndpointError};
use crate::hashing::stable_hash64;

pub struct MockEndpoint {
    model: String,
    guided: bool,
    canned: Vec<(String, String)>,
}

impl Default for MockEndpoint {
    fn default() -> Self {
        Self::new()
    }
}

fn quoted(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(a) = rest.find('"') {
        let after = &rest[a + 1..];
        let Some(b) = after.find('"') else { break };
        out.push(&after[..b]);
        rest = &after[b + 1..];
    }
    out
}

/// Keys of lines shaped like `A) label` or `12) label`.
pub fn option_keys(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .filter_map(|l| {
            let (key, _) = l.split_once(") ")?;
            (!key.is_empty() && key.len() <= 3 && key.chars().all(|c| c.is_ascii_alphanumeric()))
                .then_some(key)
        })
        .collect()
}

impl MockEndpoint {
    pub fn new() -> Self {
        Self {
            model: "mock".into(),
            guided: false,
            canned: Vec::new(),
        }
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_guided(mut self, guided: bool) -> Self {
        self.guided = guided;
        self
    }

    /// Returns `response` for any request whose user message contains
    /// `needle`. Earlier entries win.
    pub fn with_canned(mut self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.canned.push((needle.into(), response.into()));
        self
    }

    fn synthesize(&self, req: &ChatRequest) -> String {
        let user = req.user_content();
        let h = stable_hash64(&[user.as_bytes()]);
        if let Some(choices) = req.guided_choice.as_ref().filter(|c| !c.is_empty()) {
            return choices[(h % choices.len() as u64) as usize].clone();
        }
        let keys = option_keys(user);
        if !keys.is_empty() {
            return keys[(h % keys.len() as u64) as usize].to_string();
        }
        let tail = user.rsplit("\n\n").next().unwrap_or(user);
        if tail.contains("Provide a definition") {
            let list = tail.split_once("from the text:").map_or(tail, |(_, r)| r);
            let defs: Vec<String> = quoted(list)
                .into_iter()
                .map(|t| format!("\"{t}\" - a term the passage uses when describing how the court reached its decision."))
                .collect();
            if !defs.is_empty() {
                return defs.join(" ");
            }
        }
        if tail.contains("entail the sentence") {
            return "The two sentences are neutral with regard to each other. They describe different points made in the passage.".into();
        }
        let opening = quoted(tail).into_iter().next().unwrap_or("the text");
        if tail.contains("Write a summary") {
            return format!("This paragraph summarizes the discussion that begins with \"{opening}\" and states its main holding.");
        }
        if tail.contains("explanation") {
            return format!("This paragraph explains the reasoning behind the passage beginning \"{opening}\" and how it supports the result.");
        }
        if tail.contains("step by step") {
            return "Let's think step by step. First identify what the request asks, then work through the relevant facts, and finally state the answer that follows from them.".into();
        }
        "The text addresses the question raised in the request.".into()
    }
}

impl ChatEndpoint for MockEndpoint {
    fn chat(&self, req: &ChatRequest) -> Result<String, EndpointError> {
        let user = req.user_content();
        if let Some((_, r)) = self.canned.iter().find(|(n, _)| user.contains(n.as_str())) {
            return Ok(r.clone());
        }
        Ok(self.synthesize(req))
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn supports_guided(&self) -> bool {
        self.guided
    }
}
