//! Rendering a template against one passage.

use unicode_segmentation::UnicodeSegmentation;

use super::template::{Placeholder, PromptTemplate, Segment};
use super::TaskType;
use crate::endpoint::{ChatMessage, ChatRequest};
use crate::ingest::RawDocument;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("template {template} is for {expected}, not {requested}")]
    TaskMismatch {
        template: String,
        expected: TaskType,
        requested: TaskType,
    },
    #[error("passage is empty")]
    EmptyPassage,
    #[error("fewer than two terms could be extracted")]
    NoTerms,
    #[error("passage has no usable sentence pair")]
    NoSentencePair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Passages longer than this are cut at a word boundary.
    pub max_passage_words: usize,
    /// Paragraphs with at least this many words are preferred for excerpts.
    pub min_paragraph_words: usize,
    /// Longest excerpt quoted in a prompt.
    pub excerpt_words: usize,
    /// Sentences shorter than this are not used as NLI candidates.
    pub min_sentence_words: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            max_passage_words: 3000,
            min_paragraph_words: 40,
            excerpt_words: 30,
            min_sentence_words: 5,
        }
    }
}

/// A rendered system+user message pair. `question` is the task text without
/// the passage; it becomes the question of the resulting QA pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRequest {
    pub template_id: String,
    pub task: TaskType,
    pub system: String,
    pub user: String,
    pub question: String,
    /// Passage after truncation.
    pub passage: String,
}

impl PromptRequest {
    pub fn to_chat(&self, model: &str, temperature: f32, max_tokens: u32) -> ChatRequest {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage::system(&self.system), ChatMessage::user(&self.user)],
            temperature,
            max_tokens,
            guided_choice: None,
        }
    }
}

/// First `n` whitespace-separated words of `text`, original spacing kept.
pub fn truncate_words(text: &str, n: usize) -> &str {
    let mut count = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                in_word = false;
                if count == n {
                    return &text[..i];
                }
            }
        } else if !in_word {
            in_word = true;
            count += 1;
        }
    }
    text
}

pub fn paragraphs(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    for (offset, line) in line_spans(text) {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push(text[s..end].trim());
            }
        } else {
            start.get_or_insert(offset);
            end = offset + line.len();
        }
    }
    if let Some(s) = start {
        out.push(text[s..end].trim());
    }
    out
}

fn line_spans(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').map(move |l| {
        let o = offset;
        offset += l.len();
        (o, l.trim_end_matches(['\n', '\r']))
    })
}

/// First paragraph with at least `min_words` words, else the longest
/// (earliest on ties).
pub fn select_paragraph(text: &str, min_words: usize) -> Option<&str> {
    let paras = paragraphs(text);
    if let Some(p) = paras.iter().find(|p| p.split_whitespace().count() >= min_words) {
        return Some(p);
    }
    let mut best: Option<(&str, usize)> = None;
    for p in paras {
        let n = p.split_whitespace().count();
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((p, n));
        }
    }
    best.map(|(p, _)| p)
}

fn strip_terminal(s: &str) -> &str {
    s.trim().trim_end_matches(['.', '!', '?', ';', ':'])
}

pub fn sentences(text: &str) -> Vec<String> {
    text.unicode_sentences()
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Opening sentence of the selected paragraph, at most `max_words` words,
/// followed by an ellipsis.
pub fn excerpt(text: &str, cfg: &RenderConfig) -> Option<String> {
    let para = select_paragraph(text, cfg.min_paragraph_words)?;
    let first = sentences(para).into_iter().next()?;
    let cut = truncate_words(strip_terminal(&first), cfg.excerpt_words);
    Some(format!("{}...", cut.trim_end_matches([',', ' '])))
}

/// Matched longest first, so "subject matter jurisdiction" wins over "jurisdiction".
const LEGAL_TERMS: &[&str] = &[
    "abuse of discretion",
    "adverse possession",
    "affirmative defense",
    "amicus curiae",
    "beyond a reasonable doubt",
    "breach of contract",
    "burden of proof",
    "cause of action",
    "certiorari",
    "class action",
    "clearly erroneous",
    "collateral estoppel",
    "consideration",
    "de novo",
    "declaratory judgment",
    "default judgment",
    "double jeopardy",
    "due process",
    "equal protection",
    "estoppel",
    "ex parte",
    "fiduciary duty",
    "force majeure",
    "good faith",
    "habeas corpus",
    "hearsay",
    "in camera",
    "indemnification",
    "injunctive relief",
    "judicial notice",
    "jurisdiction",
    "liquidated damages",
    "mens rea",
    "motion to dismiss",
    "negligence",
    "preliminary injunction",
    "prima facie",
    "probable cause",
    "punitive damages",
    "qualified immunity",
    "res judicata",
    "respondeat superior",
    "sovereign immunity",
    "specific performance",
    "standard of review",
    "standing",
    "stare decisis",
    "statute of limitations",
    "strict liability",
    "subject matter jurisdiction",
    "summary judgment",
    "tort",
    "vicarious liability",
    "voir dire",
    "writ of mandamus",
];

const STOPWORDS: &[&str] = &[
    "against", "because", "between", "however", "although", "therefore", "whether", "without",
    "through", "another", "present", "remaining", "original", "several", "regarding",
];

/// Up to `n` legal terms in order of first appearance. Known terms are
/// matched first; remaining slots are filled with the longest distinct
/// content words.
pub fn extract_terms(text: &str, n: usize) -> Vec<String> {
    let lower = text.to_lowercase();
    let is_boundary = |i: usize| {
        i == 0 || i >= lower.len() || !lower[..i].chars().next_back().is_some_and(char::is_alphanumeric)
    };
    let mut found: Vec<(usize, &str)> = Vec::new();
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut by_len: Vec<&str> = LEGAL_TERMS.to_vec();
    by_len.sort_by_key(|t| std::cmp::Reverse(t.len()));
    for term in by_len {
        if let Some(pos) = lower.match_indices(term).map(|(i, _)| i).find(|&i| {
            let end = i + term.len();
            is_boundary(i)
                && (end >= lower.len() || !lower[end..].chars().next().is_some_and(char::is_alphanumeric))
                && !taken.iter().any(|&(s, e)| i < e && s < end)
        }) {
            taken.push((pos, pos + term.len()));
            found.push((pos, term));
        }
    }
    found.sort();
    let mut terms: Vec<String> = found.into_iter().map(|(_, t)| t.to_string()).take(n).collect();
    if terms.len() < n {
        let mut words: Vec<(usize, usize, String)> = Vec::new();
        for (pos, w) in lower.split_word_bound_indices() {
            let w = w.trim_matches(|c: char| !c.is_alphabetic());
            if w.chars().count() >= 7
                && w.chars().all(char::is_alphabetic)
                && !STOPWORDS.contains(&w)
                && !terms.iter().any(|t| t.split(' ').any(|p| p == w))
                && !words.iter().any(|(_, _, x)| x == w)
            {
                words.push((w.chars().count(), pos, w.to_string()));
            }
        }
        words.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let need = n - terms.len();
        let mut extra: Vec<_> = words.into_iter().take(need).collect();
        extra.sort_by_key(|(_, pos, _)| *pos);
        terms.extend(extra.into_iter().map(|(_, _, w)| w));
    }
    terms
}

/// First two consecutive candidate sentences of the passage.
pub fn sentence_pair(text: &str, min_words: usize) -> Option<(String, String)> {
    let mut it = sentences(text)
        .into_iter()
        .map(|s| strip_terminal(&s).to_string())
        .filter(|s| s.split_whitespace().count() >= min_words);
    Some((it.next()?, it.next()?))
}

pub fn render_prompt(
    doc: &RawDocument,
    task: TaskType,
    template: &PromptTemplate,
    cfg: &RenderConfig,
) -> Result<PromptRequest, RenderError> {
    if template.task != task {
        return Err(RenderError::TaskMismatch {
            template: template.id.clone(),
            expected: template.task,
            requested: task,
        });
    }
    let passage = truncate_words(doc.text.trim(), cfg.max_passage_words).trim();
    if passage.is_empty() {
        return Err(RenderError::EmptyPassage);
    }
    let mut excerpt_v = None;
    let mut terms_v = None;
    let mut pair_v = None;
    for p in template.placeholders() {
        match p {
            Placeholder::Excerpt if excerpt_v.is_none() => {
                excerpt_v = Some(excerpt(passage, cfg).ok_or(RenderError::EmptyPassage)?);
            }
            Placeholder::TermList if terms_v.is_none() => {
                let terms = extract_terms(passage, 2);
                if terms.len() < 2 {
                    return Err(RenderError::NoTerms);
                }
                let quoted: Vec<String> = terms.iter().map(|t| format!("\"{t}\"")).collect();
                terms_v = Some(quoted.join(", "));
            }
            Placeholder::HypothesisPair | Placeholder::Premise | Placeholder::Hypothesis
                if pair_v.is_none() =>
            {
                pair_v = Some(
                    sentence_pair(passage, cfg.min_sentence_words).ok_or(RenderError::NoSentencePair)?,
                );
            }
            _ => {}
        }
    }
    let render = |with_passage: bool| {
        let mut out = String::new();
        for seg in template.segments() {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(p) => match p {
                    Placeholder::Passage => {
                        if with_passage {
                            out.push_str(passage)
                        }
                    }
                    Placeholder::Excerpt => out.push_str(excerpt_v.as_deref().unwrap_or_default()),
                    Placeholder::TermList => out.push_str(terms_v.as_deref().unwrap_or_default()),
                    Placeholder::HypothesisPair => {
                        let (a, b) = pair_v.as_ref().expect("computed above");
                        out.push_str(&format!("\"{a}\" / \"{b}\""));
                    }
                    Placeholder::Premise => out.push_str(&pair_v.as_ref().expect("computed above").0),
                    Placeholder::Hypothesis => out.push_str(&pair_v.as_ref().expect("computed above").1),
                },
            }
        }
        out
    };
    let question = render(false).trim().to_string();
    let user = if template.uses(&Placeholder::Passage) {
        render(true)
    } else {
        format!("{passage}\n\n{question}")
    };
    Ok(PromptRequest {
        template_id: template.id.clone(),
        task,
        system: template.system.clone().unwrap_or_default(),
        user,
        question,
        passage: passage.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::template::{builtin_templates, ResponseFormat};

    fn doc(text: &str) -> RawDocument {
        RawDocument {
            id: "d".into(),
            text: text.into(),
            source: "freelaw".into(),
            token_estimate: 0,
            token_method: "word-count".into(),
            meta: Default::default(),
        }
    }

    fn template(task: TaskType) -> PromptTemplate {
        builtin_templates().into_iter().find(|t| t.task == task).unwrap()
    }

    const LONG: &str = "District courts have jurisdiction to hear appeals from final judgments, orders, and decrees issued by bankruptcy judges. Legal conclusions are reviewed de novo while findings of fact are reviewed for clear error, and mixed questions receive the standard appropriate to their dominant character in the record.";

    #[test]
    fn truncation_keeps_word_boundaries() {
        assert_eq!(truncate_words("a b  c d", 2), "a b");
        assert_eq!(truncate_words("a b", 5), "a b");
        assert_eq!(truncate_words("  a b", 1), "  a");
    }

    #[test]
    fn paragraph_selection_prefers_first_long() {
        let text = format!("Short intro.\n\n{LONG}\n\nAnother paragraph.");
        assert_eq!(select_paragraph(&text, 40), Some(LONG));
        let text = "one two\n\nthree four five\n\nsix";
        assert_eq!(select_paragraph(text, 40), Some("three four five"));
    }

    #[test]
    fn summarization_prompt() {
        let p = render_prompt(
            &doc(LONG),
            TaskType::Summarization,
            &template(TaskType::Summarization),
            &RenderConfig::default(),
        )
        .unwrap();
        assert!(p.user.contains("Write a summary for this paragraph"));
        assert_eq!(
            p.question,
            "Write a summary for this paragraph from the text, starting with: \"District courts have jurisdiction to hear appeals from final judgments, orders, and decrees issued by bankruptcy judges...\"."
        );
        assert!(p.user.starts_with(LONG));
        assert!(!p.system.is_empty());
    }

    #[test]
    fn word_to_text_prompt_lists_terms() {
        let text = "The petition for habeas corpus was denied. We find no abuse of discretion in that ruling by the court below.";
        let p = render_prompt(
            &doc(text),
            TaskType::WordToText,
            &template(TaskType::WordToText),
            &RenderConfig::default(),
        )
        .unwrap();
        assert_eq!(
            p.question,
            "Provide a definition to these two legal terms from the text: \"habeas corpus\", \"abuse of discretion\"."
        );
    }

    #[test]
    fn term_fallback_uses_long_words() {
        let terms = extract_terms("The contractor sent machinery to the warehouse.", 2);
        assert_eq!(terms, vec!["contractor", "machinery"]);
        assert!(extract_terms("a b c", 2).len() < 2);
    }

    #[test]
    fn nli_prompt_uses_first_sentence_pair() {
        let text = "The chapter 13 case was converted to a case under chapter 7 in July of 1993. The record does not show the present value of the vehicle.";
        let p = render_prompt(
            &doc(text),
            TaskType::NaturalLanguageInference,
            &template(TaskType::NaturalLanguageInference),
            &RenderConfig::default(),
        )
        .unwrap();
        assert_eq!(
            p.question,
            "Does the sentence \"The chapter 13 case was converted to a case under chapter 7 in July of 1993\" entail the sentence \"The record does not show the present value of the vehicle\"?"
        );
        let err = render_prompt(
            &doc("Only one sentence here in this document."),
            TaskType::NaturalLanguageInference,
            &template(TaskType::NaturalLanguageInference),
            &RenderConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, RenderError::NoSentencePair);
    }

    #[test]
    fn passage_placeholder_becomes_user_message() {
        let p = render_prompt(
            &doc("What is 2 + 3?"),
            TaskType::CotAugmentation,
            &template(TaskType::CotAugmentation),
            &RenderConfig::default(),
        )
        .unwrap();
        assert!(p.user.starts_with("What is 2 + 3?\n\nAnswer the request above."));
        assert!(p.question.starts_with("Answer the request above."));
    }

    #[test]
    fn task_mismatch_rejected() {
        let t = PromptTemplate::new("x", TaskType::Summarization, ResponseFormat::FreeText, None, "{excerpt}")
            .unwrap();
        assert!(matches!(
            render_prompt(&doc(LONG), TaskType::WordToText, &t, &RenderConfig::default()),
            Err(RenderError::TaskMismatch { .. })
        ));
    }
}
