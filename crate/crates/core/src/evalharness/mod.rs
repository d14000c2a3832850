//! Multiple-choice evaluation of instruct models on legal benchmark subsets.
//!
//! Each item is rendered with an enumerated option list, the model's reply
//! is forced onto one of the listed keys, and accuracy is tallied per subset.

mod format;
mod load;
mod score;
mod select;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use format::{format_item, EvalTemplate, FormattedPrompt};
pub use load::{load_benchmark, parse_benchmark, LEDGAR_LABELS, UNFAIR_TOS_CATEGORIES, UNFAIR_TOS_FAIR};
pub use score::{
    evaluate, evaluate_sequential, render_report, render_reports, score_run, EvalConfig, EvalReport, GoldEntry,
    Layout, Outcome, Prediction, SubsetScore,
};
pub use select::{constrain_select, resolve_reply, Resolution, Selection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkId {
    MmluInternationalLaw,
    MmluJurisprudence,
    MmluProfessionalLaw,
    LexglueLedgar,
    LexglueCasehold,
    LexglueUnfairTos,
}

impl BenchmarkId {
    /// Report column order.
    pub const ALL: [BenchmarkId; 6] = [
        BenchmarkId::MmluInternationalLaw,
        BenchmarkId::MmluJurisprudence,
        BenchmarkId::MmluProfessionalLaw,
        BenchmarkId::LexglueLedgar,
        BenchmarkId::LexglueCasehold,
        BenchmarkId::LexglueUnfairTos,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkId::MmluInternationalLaw => "mmlu-international-law",
            BenchmarkId::MmluJurisprudence => "mmlu-jurisprudence",
            BenchmarkId::MmluProfessionalLaw => "mmlu-professional-law",
            BenchmarkId::LexglueLedgar => "lexglue-ledgar",
            BenchmarkId::LexglueCasehold => "lexglue-casehold",
            BenchmarkId::LexglueUnfairTos => "lexglue-unfair-tos",
        }
    }

    pub fn is_mmlu(self) -> bool {
        matches!(
            self,
            BenchmarkId::MmluInternationalLaw | BenchmarkId::MmluJurisprudence | BenchmarkId::MmluProfessionalLaw
        )
    }

    fn subject(self) -> &'static str {
        match self {
            BenchmarkId::MmluInternationalLaw => "international law",
            BenchmarkId::MmluJurisprudence => "jurisprudence",
            BenchmarkId::MmluProfessionalLaw => "professional law",
            BenchmarkId::LexglueLedgar => "contract provisions",
            BenchmarkId::LexglueCasehold => "case holdings",
            BenchmarkId::LexglueUnfairTos => "terms of service",
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Subsets that are deliberately not constructible, with the reason.
pub const EXCLUDED: [(&str, &str); 3] = [
    ("eur-lex", "labels are numeric concept ids with no verbal meaning"),
    ("scotus", "most instances exceed a 4K-token context window"),
    ("ecthr", "rests on a codified convention typical of civil-law systems"),
];

impl FromStr for BenchmarkId {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        if let Some(b) = BenchmarkId::ALL.iter().find(|b| b.as_str() == norm) {
            return Ok(*b);
        }
        let bare = norm.strip_prefix("lexglue-").unwrap_or(&norm);
        let squashed = bare.replace('-', "");
        for (name, reason) in EXCLUDED {
            if squashed.starts_with(&name.replace('-', "")) {
                return Err(EvalError::Excluded {
                    id: s.to_string(),
                    reason: reason.to_string(),
                });
            }
        }
        Err(EvalError::UnknownBenchmark(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown benchmark id {0:?}")]
    UnknownBenchmark(String),
    #[error("benchmark {id:?} is excluded: {reason}")]
    Excluded { id: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{benchmark} record {line}: {message}: {record}")]
    Schema {
        benchmark: BenchmarkId,
        line: usize,
        message: String,
        record: String,
    },
    #[error("invalid item {id}: {message}")]
    InvalidItem { id: String, message: String },
    #[error("prediction for unknown item {0:?}")]
    UnknownItem(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOption {
    pub key: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub benchmark: BenchmarkId,
    pub context: String,
    pub options: Vec<BenchOption>,
    pub gold: String,
    pub token_length: u64,
}

/// Letters for up to 26 options, otherwise 1-based numbers.
pub fn option_keys(n: usize) -> Vec<String> {
    if n <= 26 {
        (0..n).map(|i| char::from(b'A' + i as u8).to_string()).collect()
    } else {
        (1..=n).map(|i| i.to_string()).collect()
    }
}

impl BenchmarkItem {
    /// Builds an item from ordered labels; `gold` is an index into `labels`.
    pub fn from_labels(
        id: impl Into<String>,
        benchmark: BenchmarkId,
        context: impl Into<String>,
        labels: Vec<String>,
        gold: usize,
    ) -> Result<Self, EvalError> {
        let id = id.into();
        let keys = option_keys(labels.len());
        let gold_key = keys.get(gold).cloned().ok_or_else(|| EvalError::InvalidItem {
            id: id.clone(),
            message: format!("gold index {gold} out of range for {} options", labels.len()),
        })?;
        let context = context.into();
        let token_length = context.split_whitespace().count() as u64;
        let item = Self {
            id,
            benchmark,
            context,
            options: keys
                .into_iter()
                .zip(labels)
                .map(|(key, label)| BenchOption { key, label })
                .collect(),
            gold: gold_key,
            token_length,
        };
        item.check()?;
        Ok(item)
    }

    pub fn check(&self) -> Result<(), EvalError> {
        let bad = |m: &str| {
            Err(EvalError::InvalidItem {
                id: self.id.clone(),
                message: m.to_string(),
            })
        };
        if self.options.len() < 2 {
            return bad("fewer than two options");
        }
        let mut keys: Vec<&str> = self.options.iter().map(|o| o.key.as_str()).collect();
        if !keys.contains(&self.gold.as_str()) {
            return bad("gold key is not an option");
        }
        keys.sort_unstable();
        keys.dedup();
        if keys.len() != self.options.len() {
            return bad("duplicate option keys");
        }
        Ok(())
    }

    pub fn keys(&self) -> Vec<&str> {
        self.options.iter().map(|o| o.key.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip_and_exclusions() {
        for b in BenchmarkId::ALL {
            assert_eq!(b.as_str().parse::<BenchmarkId>().unwrap(), b);
        }
        for ex in ["eur-lex", "lexglue-eurlex", "EUR_LEX", "scotus", "lexglue-ecthr-a", "ecthr_b"] {
            assert!(matches!(ex.parse::<BenchmarkId>(), Err(EvalError::Excluded { .. })), "{ex}");
        }
        assert!(matches!("mmlu-tax".parse::<BenchmarkId>(), Err(EvalError::UnknownBenchmark(_))));
    }

    #[test]
    fn keys_switch_to_numbers_past_26() {
        assert_eq!(option_keys(4), vec!["A", "B", "C", "D"]);
        assert_eq!(option_keys(26).last().unwrap(), "Z");
        let k = option_keys(100);
        assert_eq!((k[0].as_str(), k[99].as_str()), ("1", "100"));
    }

    #[test]
    fn item_invariants() {
        let ok = BenchmarkItem::from_labels("x", BenchmarkId::LexglueCasehold, "c", vec!["a".into(), "b".into()], 1);
        assert_eq!(ok.unwrap().gold, "B");
        assert!(BenchmarkItem::from_labels("x", BenchmarkId::LexglueCasehold, "c", vec!["a".into()], 0).is_err());
        assert!(BenchmarkItem::from_labels("x", BenchmarkId::LexglueCasehold, "c", vec!["a".into(), "b".into()], 2).is_err());
    }
}
