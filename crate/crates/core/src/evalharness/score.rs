use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{constrain_select, format_item, BenchmarkId, BenchmarkItem, EvalError, EvalTemplate, Resolution};
use crate::endpoint::CompletionClient;
use crate::ingest::TokenCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_limit")]
    pub context_limit: u64,
    #[serde(default = "default_reply_tokens")]
    pub max_tokens: u32,
}

fn default_limit() -> u64 {
    4096
}
fn default_reply_tokens() -> u32 {
    16
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_limit: default_limit(),
            max_tokens: default_reply_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    Answered { key: String, resolution: Resolution },
    SkippedOverlength { token_length: u64 },
    Errored { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    #[serde(flatten)]
    pub outcome: Outcome,
}

impl Prediction {
    pub fn answered(item_id: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            outcome: Outcome::Answered {
                key: key.into(),
                resolution: Resolution::ExactKey,
            },
        }
    }
}

fn evaluate_one(
    item: &BenchmarkItem,
    template: &EvalTemplate,
    client: &CompletionClient,
    cfg: &EvalConfig,
    counter: &dyn TokenCounter,
) -> Prediction {
    let f = format_item(item, template, cfg.context_limit, counter);
    let outcome = if f.skipped_overlength {
        Outcome::SkippedOverlength {
            token_length: f.token_length,
        }
    } else {
        match constrain_select(client, &f.prompt, &item.options, cfg.max_tokens) {
            Ok(s) => Outcome::Answered {
                key: s.key,
                resolution: s.resolution,
            },
            Err(e) => Outcome::Errored { message: e.to_string() },
        }
    };
    Prediction {
        item_id: item.id.clone(),
        outcome,
    }
}

/// Evaluates items concurrently; the result keeps dataset order.
pub fn evaluate(
    items: &[BenchmarkItem],
    template: &EvalTemplate,
    client: &CompletionClient,
    cfg: &EvalConfig,
    counter: &dyn TokenCounter,
) -> Vec<Prediction> {
    crate::par::map_ordered(items, |it| evaluate_one(it, template, client, cfg, counter))
}

pub fn evaluate_sequential(
    items: &[BenchmarkItem],
    template: &EvalTemplate,
    client: &CompletionClient,
    cfg: &EvalConfig,
    counter: &dyn TokenCounter,
) -> Vec<Prediction> {
    crate::par::map_sequential(items, |it| evaluate_one(it, template, client, cfg, counter))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub benchmark: BenchmarkId,
    pub key: String,
}

impl GoldEntry {
    pub fn map(items: &[BenchmarkItem]) -> BTreeMap<String, GoldEntry> {
        items
            .iter()
            .map(|it| {
                (
                    it.id.clone(),
                    GoldEntry {
                        benchmark: it.benchmark,
                        key: it.gold.clone(),
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub benchmark: BenchmarkId,
    pub items_total: u64,
    pub items_skipped_overlength: u64,
    pub items_errored: u64,
    pub unresolved: u64,
    pub correct: u64,
    /// `None` when every item was skipped or errored.
    pub accuracy: Option<f64>,
}

impl SubsetScore {
    fn new(benchmark: BenchmarkId) -> Self {
        Self {
            benchmark,
            items_total: 0,
            items_skipped_overlength: 0,
            items_errored: 0,
            unresolved: 0,
            correct: 0,
            accuracy: None,
        }
    }

    pub fn scored(&self) -> u64 {
        self.items_total - self.items_skipped_overlength - self.items_errored
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub template_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub subsets: Vec<SubsetScore>,
}

impl EvalReport {
    pub fn subset(&self, b: BenchmarkId) -> Option<&SubsetScore> {
        self.subsets.iter().find(|s| s.benchmark == b)
    }

    pub fn unresolved(&self) -> u64 {
        self.subsets.iter().map(|s| s.unresolved).sum()
    }

    pub fn errored(&self) -> u64 {
        self.subsets.iter().map(|s| s.items_errored).sum()
    }
}

/// Tallies predictions per subset. Skipped and errored items are left out
/// of the accuracy denominator; subsets appear in report column order.
pub fn score_run(
    predictions: &[Prediction],
    gold: &BTreeMap<String, GoldEntry>,
    model: &str,
    template_id: &str,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut subsets: BTreeMap<BenchmarkId, SubsetScore> = BTreeMap::new();
    for p in predictions {
        let g = gold.get(&p.item_id).ok_or_else(|| EvalError::UnknownItem(p.item_id.clone()))?;
        let s = subsets.entry(g.benchmark).or_insert_with(|| SubsetScore::new(g.benchmark));
        s.items_total += 1;
        match &p.outcome {
            Outcome::Answered { key, resolution } => {
                if resolution.is_unresolved() {
                    s.unresolved += 1;
                }
                if *key == g.key {
                    s.correct += 1;
                }
            }
            Outcome::SkippedOverlength { .. } => s.items_skipped_overlength += 1,
            Outcome::Errored { .. } => s.items_errored += 1,
        }
    }
    let mut notes = Vec::new();
    if subsets.contains_key(&BenchmarkId::LexglueUnfairTos) {
        notes.push(
            "lexglue-unfair-tos: multi-label gold reduced to the lowest category index; unlabeled clauses map to the fair option"
                .to_string(),
        );
    }
    let subsets = subsets
        .into_values()
        .map(|mut s| {
            let n = s.scored();
            s.accuracy = (n > 0).then(|| s.correct as f64 / n as f64);
            s
        })
        .collect();
    Ok(EvalReport {
        model: model.to_string(),
        template_id: template_id.to_string(),
        seed,
        timestamp: None,
        notes,
        subsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Table,
    Json,
}

fn column_title(b: BenchmarkId) -> &'static str {
    match b {
        BenchmarkId::MmluInternationalLaw => "MMLU International Law",
        BenchmarkId::MmluJurisprudence => "MMLU Jurisprudence",
        BenchmarkId::MmluProfessionalLaw => "MMLU Professional Law",
        BenchmarkId::LexglueLedgar => "LexGLUE LEDGAR",
        BenchmarkId::LexglueCasehold => "LexGLUE CaseHOLD",
        BenchmarkId::LexglueUnfairTos => "LexGLUE Unfair ToS",
    }
}

/// One row per report under the six fixed subset columns.
pub fn render_reports(reports: &[EvalReport], layout: Layout) -> String {
    if layout == Layout::Json {
        let mut s = if reports.len() == 1 {
            serde_json::to_string_pretty(&reports[0])
        } else {
            serde_json::to_string_pretty(reports)
        }
        .expect("report serializes");
        s.push('\n');
        return s;
    }
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Model".to_string())
        .chain(BenchmarkId::ALL.iter().map(|b| column_title(*b).to_string()))
        .collect()];
    for r in reports {
        let mut row = vec![r.model.clone()];
        for b in BenchmarkId::ALL {
            row.push(match r.subset(b).and_then(|s| s.accuracy) {
                Some(a) => format!("{a:.3}"),
                None => "n/a".to_string(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-|-"));
            out.push('\n');
        }
    }
    out
}

pub fn render_report(report: &EvalReport, layout: Layout) -> String {
    render_reports(std::slice::from_ref(report), layout)
}
