use serde::{Deserialize, Serialize};

use super::ComprehensionExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationRules {
    #[serde(default = "default_min_answer")]
    pub min_answer_chars: usize,
    #[serde(default = "default_max_answer")]
    pub max_answer_chars: usize,
}

fn default_min_answer() -> usize {
    10
}
fn default_max_answer() -> usize {
    8000
}

impl Default for ValidationRules {
    fn default() -> Self {
        Self {
            min_answer_chars: default_min_answer(),
            max_answer_chars: default_max_answer(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "kebab-case")]
pub enum Violation {
    NoTasks,
    EmptyQuestion { task: usize },
    AnswerTooShort { task: usize, len: usize },
    AnswerTooLong { task: usize, len: usize },
    AnswerCopiesPassage { task: usize },
    UncleanText { field: String },
    ZeroTokenLength,
    TextMismatch,
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::NoTasks => "no-tasks",
            Violation::EmptyQuestion { .. } => "empty-question",
            Violation::AnswerTooShort { .. } => "answer-too-short",
            Violation::AnswerTooLong { .. } => "answer-too-long",
            Violation::AnswerCopiesPassage { .. } => "answer-copies-passage",
            Violation::UncleanText { .. } => "unclean-text",
            Violation::ZeroTokenLength => "zero-token-length",
            Violation::TextMismatch => "text-mismatch",
        }
    }
}

/// Replacement characters and control characters other than tab/newline
/// are treated as encoding damage.
fn is_clean(s: &str) -> bool {
    !s.chars()
        .any(|c| c == '\u{FFFD}' || (c.is_control() && !matches!(c, '\n' | '\t' | '\r')))
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn validate_example(ex: &ComprehensionExample, rules: &ValidationRules) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if ex.tasks.is_empty() {
        v.push(Violation::NoTasks);
    }
    let passage = normalize(&ex.passage);
    if !is_clean(&ex.passage) {
        v.push(Violation::UncleanText {
            field: "passage".into(),
        });
    }
    for (i, qa) in ex.tasks.iter().enumerate() {
        if qa.question.trim().is_empty() {
            v.push(Violation::EmptyQuestion { task: i });
        }
        let len = qa.answer.trim().chars().count();
        if len < rules.min_answer_chars {
            v.push(Violation::AnswerTooShort { task: i, len });
        }
        if len > rules.max_answer_chars {
            v.push(Violation::AnswerTooLong { task: i, len });
        }
        if !passage.is_empty() && normalize(&qa.answer).contains(&passage) {
            v.push(Violation::AnswerCopiesPassage { task: i });
        }
        if !is_clean(&qa.question) || !is_clean(&qa.answer) {
            v.push(Violation::UncleanText {
                field: format!("tasks[{i}]"),
            });
        }
    }
    if ex.token_length == 0 {
        v.push(Violation::ZeroTokenLength);
    }
    if ex.text != ex.serialize() {
        v.push(Violation::TextMismatch);
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
