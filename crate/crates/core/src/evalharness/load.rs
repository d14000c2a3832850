use std::io::BufRead;
use std::path::Path;

use serde_json::Value;

use super::{BenchmarkId, BenchmarkItem, EvalError};

/// LEDGAR provision labels in dataset index order.
pub const LEDGAR_LABELS: [&str; 100] = [
    "Adjustments", "Agreements", "Amendments", "Anti-Corruption Laws", "Applicable Laws",
    "Approvals", "Arbitration", "Assignments", "Assigns", "Authority",
    "Authorizations", "Base Salary", "Benefits", "Binding Effects", "Books",
    "Brokers", "Capitalization", "Change In Control", "Closings", "Compliance With Laws",
    "Confidentiality", "Consent To Jurisdiction", "Consents", "Construction", "Cooperation",
    "Costs", "Counterparts", "Death", "Defined Terms", "Definitions",
    "Disability", "Disclosures", "Duties", "Effective Dates", "Effectiveness",
    "Employment", "Enforceability", "Enforcements", "Entire Agreements", "Erisa",
    "Existence", "Expenses", "Fees", "Financial Statements", "Forfeitures",
    "Further Assurances", "General", "Governing Laws", "Headings", "Indemnifications",
    "Indemnity", "Insurances", "Integration", "Intellectual Property", "Interests",
    "Interpretations", "Jurisdictions", "Liens", "Litigations", "Miscellaneous",
    "Modifications", "No Conflicts", "No Defaults", "No Waivers", "Non-Disparagement",
    "Notices", "Organizations", "Participations", "Payments", "Positions",
    "Powers", "Publicity", "Qualifications", "Records", "Releases",
    "Remedies", "Representations", "Sales", "Sanctions", "Severability",
    "Solvency", "Specific Performance", "Submission To Jurisdiction", "Subsidiaries", "Successors",
    "Survival", "Tax Withholdings", "Taxes", "Terminations", "Terms",
    "Titles", "Transactions With Affiliates", "Use Of Proceeds", "Vacations", "Venues",
    "Vesting", "Waiver Of Jury Trials", "Waivers", "Warranties", "Withholdings",
];

/// UnfairToS unfairness categories in dataset index order.
pub const UNFAIR_TOS_CATEGORIES: [&str; 8] = [
    "Limitation of liability",
    "Unilateral termination",
    "Unilateral change",
    "Content removal",
    "Contract by using",
    "Choice of law",
    "Jurisdiction",
    "Arbitration",
];

/// Listed after the categories so a fair clause has a correct answer.
pub const UNFAIR_TOS_FAIR: &str = "None of the above (the clause is fair)";

struct Rec<'a> {
    benchmark: BenchmarkId,
    line: usize,
    raw: &'a str,
    v: Value,
}

impl Rec<'_> {
    fn err(&self, message: impl Into<String>) -> EvalError {
        let mut record = self.raw.to_string();
        if record.len() > 200 {
            let mut cut = 200;
            while !record.is_char_boundary(cut) {
                cut -= 1;
            }
            record.truncate(cut);
            record.push_str("...");
        }
        EvalError::Schema {
            benchmark: self.benchmark,
            line: self.line,
            message: message.into(),
            record,
        }
    }

    fn str_field(&self, name: &str) -> Result<String, EvalError> {
        self.v
            .get(name)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| self.err(format!("missing string field {name:?}")))
    }

    fn str_list(&self, name: &str) -> Result<Vec<String>, EvalError> {
        let arr = self
            .v
            .get(name)
            .and_then(Value::as_array)
            .ok_or_else(|| self.err(format!("missing array field {name:?}")))?;
        arr.iter()
            .map(|x| x.as_str().map(str::to_string).ok_or_else(|| self.err(format!("{name:?} must hold strings"))))
            .collect()
    }

    /// Integer index, numeric string, or option letter.
    fn index_field(&self, name: &str) -> Result<usize, EvalError> {
        let v = self.v.get(name).ok_or_else(|| self.err(format!("missing field {name:?}")))?;
        if let Some(n) = v.as_u64() {
            return Ok(n as usize);
        }
        if let Some(s) = v.as_str() {
            let s = s.trim();
            if let Ok(n) = s.parse::<usize>() {
                return Ok(n);
            }
            if s.len() == 1 && s.as_bytes()[0].is_ascii_uppercase() {
                return Ok((s.as_bytes()[0] - b'A') as usize);
            }
        }
        Err(self.err(format!("{name:?} is not an index")))
    }
}

fn item_from(rec: &Rec<'_>, n: usize) -> Result<BenchmarkItem, EvalError> {
    let id = format!("{}:{n}", rec.benchmark);
    let (context, labels, gold) = match rec.benchmark {
        b if b.is_mmlu() => {
            let choices = rec.str_list("choices")?;
            (rec.str_field("question")?, choices, rec.index_field("answer")?)
        }
        BenchmarkId::LexglueLedgar => {
            let label = match rec.v.get("label").and_then(Value::as_str) {
                Some(name) if name.parse::<usize>().is_err() => LEDGAR_LABELS
                    .iter()
                    .position(|l| l.eq_ignore_ascii_case(name))
                    .ok_or_else(|| rec.err(format!("unknown LEDGAR label {name:?}")))?,
                _ => rec.index_field("label")?,
            };
            let labels = LEDGAR_LABELS.iter().map(|s| s.to_string()).collect();
            (rec.str_field("text")?, labels, label)
        }
        BenchmarkId::LexglueCasehold => {
            let endings = rec.str_list("endings")?;
            if endings.len() != 5 {
                return Err(rec.err(format!("expected 5 endings, found {}", endings.len())));
            }
            (rec.str_field("context")?, endings, rec.index_field("label")?)
        }
        BenchmarkId::LexglueUnfairTos => {
            let labels = rec
                .v
                .get("labels")
                .and_then(Value::as_array)
                .ok_or_else(|| rec.err("missing array field \"labels\""))?;
            let mut idx = Vec::with_capacity(labels.len());
            for l in labels {
                let i = l.as_u64().ok_or_else(|| rec.err("\"labels\" must hold integers"))? as usize;
                if i >= UNFAIR_TOS_CATEGORIES.len() {
                    return Err(rec.err(format!("label {i} out of range")));
                }
                idx.push(i);
            }
            let mut options: Vec<String> = UNFAIR_TOS_CATEGORIES.iter().map(|s| s.to_string()).collect();
            options.push(UNFAIR_TOS_FAIR.to_string());
            let gold = idx.into_iter().min().unwrap_or(UNFAIR_TOS_CATEGORIES.len());
            (rec.str_field("text")?, options, gold)
        }
        _ => unreachable!("all benchmarks handled"),
    };
    if gold >= labels.len() {
        return Err(rec.err(format!("answer index {gold} out of range for {} options", labels.len())));
    }
    BenchmarkItem::from_labels(id, rec.benchmark, context, labels, gold).map_err(|e| rec.err(e.to_string()))
}

/// Maps JSON Lines in a subset's published schema onto items. Blank lines
/// are ignored; any malformed record is fatal.
pub fn parse_benchmark(benchmark: BenchmarkId, reader: impl BufRead, path: &str) -> Result<Vec<BenchmarkItem>, EvalError> {
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec = Rec {
            benchmark,
            line: i + 1,
            raw: &line,
            v: Value::Null,
        };
        rec.v = serde_json::from_str(&line).map_err(|e| rec.err(format!("invalid JSON ({e})")))?;
        items.push(item_from(&rec, items.len())?);
    }
    Ok(items)
}

pub fn load_benchmark(name: &str, path: &Path) -> Result<Vec<BenchmarkItem>, EvalError> {
    let benchmark: BenchmarkId = name.parse()?;
    let f = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_benchmark(benchmark, std::io::BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(b: BenchmarkId, s: &str) -> Result<Vec<BenchmarkItem>, EvalError> {
        parse_benchmark(b, s.as_bytes(), "mem")
    }

    #[test]
    fn ledgar_has_one_hundred_distinct_labels() {
        let mut v = LEDGAR_LABELS.to_vec();
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), 100);
    }

    #[test]
    fn mmlu_schema() {
        let s = r#"{"question":"Q?","subject":"jurisprudence","choices":["w","x","y","z"],"answer":2}
{"question":"R?","choices":["w","x","y","z"],"answer":"D"}"#;
        let items = parse(BenchmarkId::MmluJurisprudence, s).unwrap();
        assert_eq!(items[0].keys(), vec!["A", "B", "C", "D"]);
        assert_eq!(items[0].gold, "C");
        assert_eq!(items[1].gold, "D");
        assert_eq!(items[1].id, "mmlu-jurisprudence:1");
    }

    #[test]
    fn casehold_schema() {
        let s = r#"{"context":"cite (<HOLDING>)","endings":["a","b","c","d","e"],"label":"3"}"#;
        let it = &parse(BenchmarkId::LexglueCasehold, s).unwrap()[0];
        assert_eq!(it.options.len(), 5);
        assert_eq!(it.gold, "D");
        assert_eq!(it.context, "cite (<HOLDING>)");
        let bad = r#"{"context":"c","endings":["a","b"],"label":0}"#;
        assert!(matches!(parse(BenchmarkId::LexglueCasehold, bad), Err(EvalError::Schema { line: 1, .. })));
    }

    #[test]
    fn ledgar_schema() {
        let it = &parse(BenchmarkId::LexglueLedgar, r#"{"text":"t","label":47}"#).unwrap()[0];
        assert_eq!(it.options.len(), 100);
        assert_eq!(it.options[0].key, "1");
        assert_eq!(it.gold, "48");
        assert_eq!(it.options[47].label, "Governing Laws");
        let named = &parse(BenchmarkId::LexglueLedgar, r#"{"text":"t","label":"notices"}"#).unwrap()[0];
        assert_eq!(named.options.iter().find(|o| o.key == named.gold).unwrap().label, "Notices");
    }

    #[test]
    fn unfair_tos_reduced_to_single_choice() {
        let s = "{\"text\":\"a\",\"labels\":[6,2]}\n\n{\"text\":\"b\",\"labels\":[]}\n";
        let items = parse(BenchmarkId::LexglueUnfairTos, s).unwrap();
        assert_eq!(items[0].options.len(), 9);
        assert_eq!(items[0].gold, "C");
        assert_eq!(items[1].gold, "I");
        assert_eq!(items[1].options[8].label, UNFAIR_TOS_FAIR);
    }

    #[test]
    fn schema_errors_name_the_record() {
        let err = parse(BenchmarkId::MmluInternationalLaw, "{\"question\":\"q\"}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 1") && msg.contains("choices") && msg.contains("{\"question\""), "{msg}");
        assert!(parse(BenchmarkId::MmluInternationalLaw, "not json").is_err());
        let wide = r#"{"question":"q","choices":["a","b"],"answer":5}"#;
        assert!(parse(BenchmarkId::MmluInternationalLaw, wide).is_err());
    }

    #[test]
    fn excluded_loader_is_config_error() {
        let e = load_benchmark("eur-lex", Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(e, EvalError::Excluded { .. }));
    }
}
