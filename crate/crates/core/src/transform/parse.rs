//! Turning raw completions into QA pairs.

use super::{QAPair, TaskType};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("completion is empty")]
    Empty,
    #[error("completion has {len} characters, below the minimum of {min}")]
    TooShort { len: usize, min: usize },
    #[error("inference answer states no relation label")]
    MissingRelationLabel,
}

impl ParseError {
    /// Quality rejections are well-formed completions that fail a content
    /// rule; the rest are parse failures.
    pub fn is_quality_rejection(&self) -> bool {
        !matches!(self, ParseError::Empty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationLabel {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseConfig {
    pub min_chars: usize,
}

impl Default for ParseConfig {
    fn default() -> Self {
        Self { min_chars: 10 }
    }
}

const BOILERPLATE: &[&str] = &[
    "sure",
    "certainly",
    "of course",
    "absolutely",
    "here is",
    "here are",
    "here's",
];

fn starts_with_ci(s: &str, prefix: &str) -> bool {
    s.len() >= prefix.len()
        && s.is_char_boundary(prefix.len())
        && s[..prefix.len()].eq_ignore_ascii_case(prefix)
}

/// Removes assistant chatter such as "Sure, here is the summary:" from the
/// start of a completion.
pub fn strip_boilerplate(raw: &str) -> &str {
    let mut s = raw.trim();
    loop {
        let Some(prefix) = BOILERPLATE.iter().find(|p| starts_with_ci(s, p)) else {
            return s;
        };
        let after = &s[prefix.len()..];
        if after.chars().next().is_some_and(char::is_alphanumeric) {
            return s;
        }
        let line_end = s.find('\n').unwrap_or(s.len());
        let line = &s[..line_end];
        let next = if line.trim_end().ends_with(':') {
            &s[line_end..]
        } else if let Some(colon) = line.find(':') {
            &s[colon + 1..]
        } else if let Some(i) = after.find([',', '!', '.']) {
            let cut = &after[i + 1..];
            // "Sure, the answer ..." keeps the clause; a bare "Here is the
            // summary." line goes entirely.
            if prefix.starts_with("here") {
                &s[line_end..]
            } else {
                cut
            }
        } else {
            return s;
        };
        let trimmed = next.trim_start();
        if trimmed.is_empty() || trimmed.len() == s.len() {
            return s;
        }
        s = trimmed;
    }
}

const LIST_MARKS: &[char] = &[' ', '\t', '\r', '\n', '-', '*', '\u{2022}'];

/// Quoted term followed by a dash or colon, e.g. `"habeas corpus" - a writ`.
fn definition_starts(s: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while let Some(off) = s[i..].find(['"', '\u{201c}']) {
        let q = i + off;
        let open_len = if bytes[q] == b'"' { 1 } else { '\u{201c}'.len_utf8() };
        let before = s[..q].trim_end_matches(LIST_MARKS);
        let at_boundary = before.is_empty()
            || before.ends_with(['.', '!', '?', ';', ':'])
            || s[before.len()..q].contains('\n');
        let body_start = q + open_len;
        let Some(close_off) = s[body_start..].find(['"', '\u{201d}']) else {
            break;
        };
        let close = body_start + close_off;
        let close_len = s[close..].chars().next().map_or(1, char::len_utf8);
        let term = s[body_start..close].trim().to_string();
        let rest = &s[close + close_len..];
        let sep = rest.trim_start_matches([' ', '\t']);
        let has_sep = ["-", "\u{2013}", "\u{2014}", ":"]
            .iter()
            .any(|d| sep.starts_with(d) && sep[d.len()..].starts_with(char::is_whitespace));
        if at_boundary && has_sep && !term.is_empty() && !term.contains('\n') {
            out.push((q, term));
        }
        i = close + close_len;
    }
    out
}

fn first_sentence(s: &str) -> &str {
    let end = s
        .find(['.', '!', '?', '\n'])
        .map(|i| i + 1)
        .unwrap_or(s.len());
    &s[..end]
}

/// Relation stated in the opening sentence of an inference answer.
pub fn relation_label(answer: &str) -> Option<RelationLabel> {
    let first = first_sentence(answer.trim()).to_lowercase();
    if first.contains("contradict") {
        Some(RelationLabel::Contradiction)
    } else if first.contains("neutral")
        || first.contains("not entail")
        || first.contains("does not entail")
        || first.contains("no entailment")
    {
        Some(RelationLabel::Neutral)
    } else if first.contains("entail") || first.starts_with("yes") {
        Some(RelationLabel::Entailment)
    } else {
        None
    }
}

/// Splits `raw` into QA pairs for `task`, each paired with `question`.
///
/// Definition lists are split into one pair per quoted term; the question of
/// each split pair names that term.
pub fn parse_completion(
    raw: &str,
    task: TaskType,
    question: &str,
    cfg: &ParseConfig,
) -> Result<Vec<QAPair>, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let body = strip_boilerplate(raw);
    let len = body.chars().count();
    if len < cfg.min_chars {
        return Err(ParseError::TooShort {
            len,
            min: cfg.min_chars,
        });
    }
    let single = || {
        vec![QAPair {
            task,
            question: question.to_string(),
            answer: body.to_string(),
        }]
    };
    match task {
        TaskType::WordToText => {
            let starts = definition_starts(body);
            if starts.len() < 2 {
                return Ok(single());
            }
            let mut pairs = Vec::with_capacity(starts.len());
            for (k, (pos, term)) in starts.iter().enumerate() {
                let begin = if k == 0 {
                    let pre = body[..*pos].trim_end_matches(LIST_MARKS);
                    if pre.is_empty() || pre.ends_with(':') {
                        *pos
                    } else {
                        0
                    }
                } else {
                    *pos
                };
                let end = starts.get(k + 1).map_or(body.len(), |(p, _)| *p);
                let answer = body[begin..end].trim_end_matches(LIST_MARKS).trim().to_string();
                pairs.push(QAPair {
                    task,
                    question: format!("Provide a definition to this legal term from the text: \"{term}\"."),
                    answer,
                });
            }
            Ok(pairs)
        }
        TaskType::NaturalLanguageInference => {
            if relation_label(body).is_none() {
                return Err(ParseError::MissingRelationLabel);
            }
            Ok(single())
        }
        _ => Ok(single()),
    }
}
