use serde::{Deserialize, Serialize};

use super::{BenchmarkId, BenchmarkItem};
use crate::ingest::{estimate_tokens, TokenCounter};

/// Versioned wording for benchmark prompts. `instruction` may use `{first}`
/// and `{last}`, which expand to the first and last option keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalTemplate {
    pub id: String,
    pub instruction: String,
}

impl Default for EvalTemplate {
    fn default() -> Self {
        Self::builtin()
    }
}

impl EvalTemplate {
    pub const BUILTIN_ID: &'static str = "mc-instruct-v1";

    pub fn builtin() -> Self {
        Self {
            id: Self::BUILTIN_ID.into(),
            instruction: "Answer with exactly one option key from {first} to {last} and nothing else.".into(),
        }
    }
}

fn preamble(b: BenchmarkId) -> String {
    match b {
        b if b.is_mmlu() => format!("The following is a multiple choice question about {}.", b.subject()),
        BenchmarkId::LexglueLedgar => "Which label best describes the following contract provision?".into(),
        BenchmarkId::LexglueCasehold => {
            "The following excerpt from a court decision omits a holding, marked <HOLDING>. Which holding statement belongs there?".into()
        }
        _ => "Which category of unfair term best describes the following clause from online terms of service? If the clause is not unfair, choose the last option.".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedPrompt {
    pub item_id: String,
    pub prompt: String,
    pub token_length: u64,
    pub skipped_overlength: bool,
}

pub fn format_item(
    item: &BenchmarkItem,
    template: &EvalTemplate,
    context_limit: u64,
    counter: &dyn TokenCounter,
) -> FormattedPrompt {
    let mut p = String::new();
    p.push_str(&preamble(item.benchmark));
    p.push_str("\n\n");
    p.push_str(item.context.trim());
    p.push_str("\n\nOptions:\n");
    for o in &item.options {
        p.push_str(&o.key);
        p.push_str(") ");
        p.push_str(o.label.trim());
        p.push('\n');
    }
    let first = item.options.first().map_or("", |o| o.key.as_str());
    let last = item.options.last().map_or("", |o| o.key.as_str());
    p.push('\n');
    p.push_str(&template.instruction.replace("{first}", first).replace("{last}", last));
    let token_length = estimate_tokens(&p, counter) as u64;
    FormattedPrompt {
        item_id: item.id.clone(),
        prompt: p,
        token_length,
        skipped_overlength: token_length > context_limit,
    }
}
