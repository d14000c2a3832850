//! Raw passage → reading-comprehension example.
//!
//! For each document: choose task types, render one prompt per task, query
//! the completion endpoint, parse the answer into QA pairs and validate the
//! assembled example. Legal passages draw from the four comprehension tasks;
//! general-domain passages get chain-of-thought augmentation instead.

pub mod parse;
pub mod prompt;
pub mod select;
pub mod template;
pub mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::endpoint::CompletionClient;
use crate::hashing::stable_hash64;
use crate::ingest::{RawDocument, TokenCounter};

pub use parse::{parse_completion, ParseConfig, ParseError, RelationLabel};
pub use prompt::{render_prompt, PromptRequest, RenderConfig, RenderError};
pub use select::{select_tasks, SelectError, TaskPolicy};
pub use template::{PromptDb, PromptTemplate, ResponseFormat, TemplateError};
pub use validate::{validate_example, ValidationRules, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    CommonsenseReasoning,
    WordToText,
    NaturalLanguageInference,
    Summarization,
    CotAugmentation,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::CommonsenseReasoning,
        TaskType::WordToText,
        TaskType::NaturalLanguageInference,
        TaskType::Summarization,
        TaskType::CotAugmentation,
    ];

    pub const LEGAL: [TaskType; 4] = [
        TaskType::CommonsenseReasoning,
        TaskType::WordToText,
        TaskType::NaturalLanguageInference,
        TaskType::Summarization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::CommonsenseReasoning => "commonsense-reasoning",
            TaskType::WordToText => "word-to-text",
            TaskType::NaturalLanguageInference => "natural-language-inference",
            TaskType::Summarization => "summarization",
            TaskType::CotAugmentation => "cot-augmentation",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub task: TaskType,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComprehensionExample {
    /// Id of the source document.
    pub source_doc: String,
    pub source: String,
    pub passage: String,
    pub tasks: Vec<QAPair>,
    pub separator: String,
    /// Serialized training text.
    pub text: String,
    pub token_length: usize,
    pub token_method: String,
    pub model: String,
    pub templates: Vec<String>,
}

impl ComprehensionExample {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        passage: impl Into<String>,
        tasks: Vec<QAPair>,
        separator: impl Into<String>,
        model: impl Into<String>,
        templates: Vec<String>,
        counter: &dyn TokenCounter,
    ) -> Self {
        let mut ex = Self {
            source_doc: id.into(),
            source: source.into(),
            passage: passage.into(),
            tasks,
            separator: separator.into(),
            text: String::new(),
            token_length: 0,
            token_method: counter.method().to_string(),
            model: model.into(),
            templates,
        };
        ex.text = ex.serialize();
        ex.token_length = counter.count(&ex.text);
        ex
    }

    /// Passage, then each QA pair as `question\nanswer`, joined by the
    /// separator.
    pub fn serialize(&self) -> String {
        let mut out = self.passage.clone();
        for qa in &self.tasks {
            out.push_str(&self.separator);
            out.push_str(&qa.question);
            out.push('\n');
            out.push_str(&qa.answer);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TransformSettings {
    pub policy: TaskPolicy,
    pub seed: u64,
    pub separator: String,
    pub render: RenderConfig,
    pub parse: ParseConfig,
    pub rules: ValidationRules,
    pub temperature: f32,
    pub max_tokens: u32,
    /// Share of documents routed to the secondary endpoint, if one is set.
    pub secondary_ratio: f64,
}

impl Default for TransformSettings {
    fn default() -> Self {
        Self {
            policy: TaskPolicy::uniform(2),
            seed: 0,
            separator: "\n\n".into(),
            render: RenderConfig::default(),
            parse: ParseConfig::default(),
            rules: ValidationRules::default(),
            temperature: 0.7,
            max_tokens: 512,
            secondary_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformCounters {
    pub documents: usize,
    pub emitted: usize,
    pub tasks_attempted: usize,
    pub render_errors: usize,
    pub parse_errors: usize,
    pub quality_rejections: usize,
    pub transport_errors: usize,
    pub validation_failures: usize,
    pub dropped: usize,
}

impl TransformCounters {
    pub fn merge(&mut self, o: &TransformCounters) {
        self.documents += o.documents;
        self.emitted += o.emitted;
        self.tasks_attempted += o.tasks_attempted;
        self.render_errors += o.render_errors;
        self.parse_errors += o.parse_errors;
        self.quality_rejections += o.quality_rejections;
        self.transport_errors += o.transport_errors;
        self.validation_failures += o.validation_failures;
        self.dropped += o.dropped;
    }
}

#[derive(Debug, Clone)]
pub struct DocOutcome {
    pub example: Option<ComprehensionExample>,
    pub counters: TransformCounters,
    pub violations: Vec<Violation>,
}

/// One input to a transform batch.
#[derive(Debug, Clone)]
pub struct TransformInput {
    pub doc: RawDocument,
    /// General-domain (non-legal) data receives chain-of-thought
    /// augmentation instead of comprehension tasks.
    pub general: bool,
}

pub struct Transformer<'a> {
    pub db: &'a PromptDb,
    pub primary: &'a CompletionClient,
    pub secondary: Option<&'a CompletionClient>,
    pub counter: &'a dyn TokenCounter,
    pub settings: &'a TransformSettings,
}

impl Transformer<'_> {
    fn client_for(&self, doc: &RawDocument) -> &CompletionClient {
        match self.secondary {
            Some(sec) if self.settings.secondary_ratio > 0.0 => {
                let h = stable_hash64(&[
                    &self.settings.seed.to_le_bytes(),
                    b"endpoint",
                    doc.id.as_bytes(),
                ]);
                if (h as f64 / u64::MAX as f64) < self.settings.secondary_ratio {
                    sec
                } else {
                    self.primary
                }
            }
            _ => self.primary,
        }
    }

    pub fn tasks_for(&self, input: &TransformInput) -> Vec<TaskType> {
        if input.general {
            vec![TaskType::CotAugmentation]
        } else {
            select_tasks(&input.doc, &self.settings.policy, self.settings.seed)
        }
    }

    pub fn transform_document(&self, input: &TransformInput) -> DocOutcome {
        let doc = &input.doc;
        let s = self.settings;
        let mut c = TransformCounters {
            documents: 1,
            ..Default::default()
        };
        let client = self.client_for(doc);
        let mut pairs = Vec::new();
        let mut templates = Vec::new();
        let mut passage = None;
        for task in self.tasks_for(input) {
            c.tasks_attempted += 1;
            let key = stable_hash64(&[
                &s.seed.to_le_bytes(),
                b"template",
                doc.id.as_bytes(),
                task.as_str().as_bytes(),
            ]);
            let template = self.db.pick(task, key);
            let req = match render_prompt(doc, task, template, &s.render) {
                Ok(r) => r,
                Err(_) => {
                    c.render_errors += 1;
                    continue;
                }
            };
            let chat = req.to_chat(client.model(), s.temperature, s.max_tokens);
            let raw = match client.complete(&chat) {
                Ok(done) => done.content,
                Err(_) => {
                    c.transport_errors += 1;
                    continue;
                }
            };
            match parse_completion(&raw, task, &req.question, &s.parse) {
                Ok(mut qa) => {
                    pairs.append(&mut qa);
                    templates.push(template.id.clone());
                    passage.get_or_insert(req.passage);
                }
                Err(e) if e.is_quality_rejection() => c.quality_rejections += 1,
                Err(_) => c.parse_errors += 1,
            }
        }
        let Some(passage) = passage else {
            c.dropped += 1;
            return DocOutcome {
                example: None,
                counters: c,
                violations: Vec::new(),
            };
        };
        let ex = ComprehensionExample::new(
            doc.id.clone(),
            doc.source.clone(),
            passage,
            pairs,
            s.separator.clone(),
            client.model(),
            templates,
            self.counter,
        );
        match validate_example(&ex, &s.rules) {
            Ok(()) => {
                c.emitted += 1;
                DocOutcome {
                    example: Some(ex),
                    counters: c,
                    violations: Vec::new(),
                }
            }
            Err(violations) => {
                c.validation_failures += 1;
                c.dropped += 1;
                DocOutcome {
                    example: None,
                    counters: c,
                    violations,
                }
            }
        }
    }

    /// Transforms a batch in parallel; output keeps input order.
    pub fn transform_batch(&self, inputs: &[TransformInput]) -> (Vec<ComprehensionExample>, TransformCounters) {
        let outcomes = crate::par::map_ordered(inputs, |i| self.transform_document(i));
        Self::collect(outcomes)
    }

    pub fn transform_batch_sequential(
        &self,
        inputs: &[TransformInput],
    ) -> (Vec<ComprehensionExample>, TransformCounters) {
        let outcomes = crate::par::map_sequential(inputs, |i| self.transform_document(i));
        Self::collect(outcomes)
    }

    fn collect(outcomes: Vec<DocOutcome>) -> (Vec<ComprehensionExample>, TransformCounters) {
        let mut counters = TransformCounters::default();
        let mut out = Vec::new();
        for o in outcomes {
            counters.merge(&o.counters);
            out.extend(o.example);
        }
        (out, counters)
    }
}
