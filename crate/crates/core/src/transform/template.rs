//! Prompt database: templates with TOML front-matter and a placeholder body.
//!
//! ```text
//! +++
//! id = "summarization-v1"
//! task = "summarization"
//! response_format = "free-text"
//! +++
//! Write a summary for this paragraph from the text, starting with: "{excerpt}".
//! ```
//!
//! `{{` and `}}` are literal braces.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TaskType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseFormat {
    FreeText,
    DefinitionList,
    LabelPlusRationale,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    Passage,
    Excerpt,
    TermList,
    HypothesisPair,
    Premise,
    Hypothesis,
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "passage" => Placeholder::Passage,
            "excerpt" => Placeholder::Excerpt,
            "term_list" => Placeholder::TermList,
            "hypothesis_pair" => Placeholder::HypothesisPair,
            "hypothesis_pair.premise" => Placeholder::Premise,
            "hypothesis_pair.hypothesis" => Placeholder::Hypothesis,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {id}: undeclared placeholder {{{name}}}")]
    UndeclaredPlaceholder { id: String, name: String },
    #[error("template {id}: unbalanced brace at byte {at}")]
    Unbalanced { id: String, at: usize },
    #[error("template file {file}: {reason}")]
    BadFile { file: String, reason: String },
    #[error("duplicate template id {0}")]
    Duplicate(String),
    #[error("no template for task {0}")]
    MissingTask(TaskType),
    #[error("unknown template id {0}")]
    UnknownId(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Segment {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub task: TaskType,
    pub response_format: ResponseFormat,
    pub system: Option<String>,
    pub body: String,
    segments: Vec<Segment>,
}

fn parse_body(id: &str, body: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut lit = String::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < body.len() {
        let c = bytes[i];
        if c == b'{' && bytes.get(i + 1) == Some(&b'{') {
            lit.push('{');
            i += 2;
        } else if c == b'}' && bytes.get(i + 1) == Some(&b'}') {
            lit.push('}');
            i += 2;
        } else if c == b'{' {
            let end = body[i + 1..].find('}').ok_or(TemplateError::Unbalanced {
                id: id.into(),
                at: i,
            })? + i + 1;
            let name = body[i + 1..end].trim();
            let slot = Placeholder::parse(name).ok_or_else(|| TemplateError::UndeclaredPlaceholder {
                id: id.into(),
                name: name.into(),
            })?;
            if !lit.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut lit)));
            }
            segments.push(Segment::Slot(slot));
            i = end + 1;
        } else if c == b'}' {
            return Err(TemplateError::Unbalanced { id: id.into(), at: i });
        } else {
            let ch = body[i..].chars().next().expect("in bounds");
            lit.push(ch);
            i += ch.len_utf8();
        }
    }
    if !lit.is_empty() {
        segments.push(Segment::Literal(lit));
    }
    Ok(segments)
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        task: TaskType,
        response_format: ResponseFormat,
        system: Option<String>,
        body: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let id = id.into();
        let body = body.into();
        let segments = parse_body(&id, &body)?;
        Ok(Self {
            id,
            task,
            response_format,
            system,
            body,
            segments,
        })
    }

    pub(crate) fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &Placeholder> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(p) => Some(p),
            Segment::Literal(_) => None,
        })
    }

    pub fn uses(&self, p: &Placeholder) -> bool {
        self.placeholders().any(|q| q == p)
    }

    /// Parses a template file with `+++`-delimited TOML front-matter.
    pub fn parse_file(name: &str, contents: &str) -> Result<Self, TemplateError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Front {
            id: String,
            task: TaskType,
            response_format: ResponseFormat,
            #[serde(default)]
            system: Option<String>,
        }
        let bad = |reason: &str| TemplateError::BadFile {
            file: name.into(),
            reason: reason.into(),
        };
        let rest = contents
            .strip_prefix("+++")
            .ok_or_else(|| bad("missing +++ front-matter"))?;
        let (front, body) = rest
            .split_once("\n+++")
            .ok_or_else(|| bad("unterminated front-matter"))?;
        let front: Front = toml::from_str(front).map_err(|e| bad(&e.to_string()))?;
        let body = body.strip_prefix('\n').or_else(|| body.strip_prefix("\r\n")).unwrap_or(body);
        Self::new(
            front.id,
            front.task,
            front.response_format,
            front.system,
            body.trim_end().to_string(),
        )
    }
}

const LEGAL_SYSTEM: &str =
    "You are a legal expert. Answer using only the text provided. Reply in plain prose.";
const COT_SYSTEM: &str =
    "You are a careful assistant. Work through the problem step by step, then state the final answer.";

/// Templates shipped with the tool. The four legal task prompts follow the
/// question shapes of the published transformation examples.
pub fn builtin_templates() -> Vec<PromptTemplate> {
    let legal = Some(LEGAL_SYSTEM.to_string());
    let specs: [(&str, TaskType, ResponseFormat, Option<String>, &str); 5] = [
        (
            "commonsense-reasoning-v1",
            TaskType::CommonsenseReasoning,
            ResponseFormat::FreeText,
            legal.clone(),
            "What is an explanation to this paragraph from the text, starting with: \"{excerpt}\"?",
        ),
        (
            "word-to-text-v1",
            TaskType::WordToText,
            ResponseFormat::DefinitionList,
            legal.clone(),
            "Provide a definition to these two legal terms from the text: {term_list}.",
        ),
        (
            "natural-language-inference-v1",
            TaskType::NaturalLanguageInference,
            ResponseFormat::LabelPlusRationale,
            legal.clone(),
            "Does the sentence \"{hypothesis_pair.premise}\" entail the sentence \"{hypothesis_pair.hypothesis}\"?",
        ),
        (
            "summarization-v1",
            TaskType::Summarization,
            ResponseFormat::FreeText,
            legal,
            "Write a summary for this paragraph from the text, starting with: \"{excerpt}\".",
        ),
        (
            "cot-augmentation-v1",
            TaskType::CotAugmentation,
            ResponseFormat::FreeText,
            Some(COT_SYSTEM.to_string()),
            "{passage}\n\nAnswer the request above. Let's think step by step before giving the final answer.",
        ),
    ];
    specs
        .into_iter()
        .map(|(id, task, fmt, system, body)| {
            PromptTemplate::new(id, task, fmt, system, body).expect("builtin template is valid")
        })
        .collect()
}

/// All templates available to a run, grouped by task.
#[derive(Debug, Clone)]
pub struct PromptDb {
    by_task: BTreeMap<TaskType, Vec<PromptTemplate>>,
}

impl PromptDb {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self, TemplateError> {
        let mut by_task: BTreeMap<TaskType, Vec<PromptTemplate>> = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for t in templates {
            if !seen.insert(t.id.clone()) {
                return Err(TemplateError::Duplicate(t.id));
            }
            by_task.entry(t.task).or_default().push(t);
        }
        for task in TaskType::ALL {
            if !by_task.contains_key(&task) {
                return Err(TemplateError::MissingTask(task));
            }
        }
        for list in by_task.values_mut() {
            list.sort_by(|a, b| a.id.cmp(&b.id));
        }
        Ok(Self { by_task })
    }

    pub fn builtin() -> Self {
        Self::new(builtin_templates()).expect("builtin set covers every task")
    }

    /// Loads every `*.tmpl` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let io = |e: std::io::Error| TemplateError::BadFile {
            file: dir.display().to_string(),
            reason: e.to_string(),
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "tmpl"))
            .collect();
        paths.sort();
        let mut templates = Vec::new();
        for p in paths {
            let text = std::fs::read_to_string(&p).map_err(io)?;
            templates.push(PromptTemplate::parse_file(&p.display().to_string(), &text)?);
        }
        Self::new(templates)
    }

    pub fn for_task(&self, task: TaskType) -> &[PromptTemplate] {
        self.by_task.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Deterministic choice among a task's templates.
    pub fn pick(&self, task: TaskType, key: u64) -> &PromptTemplate {
        let list = self.for_task(task);
        &list[(key % list.len() as u64) as usize]
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.by_task.values().flatten().map(|t| t.id.as_str())
    }
}
