//! Token-budgeted blending of legal and general sources.
//!
//! A [`MixSpec`] declares a token target per source. [`plan_mix`] caps each
//! target by what is available; [`sample_mix`] draws whole examples from each
//! source until its quota is first met or exceeded, then applies one global
//! seeded shuffle.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Legal,
    MathCot,
    CommonsenseCot,
    ReasoningCot,
    Chat,
    Code,
    Instruction,
}

impl Domain {
    pub fn is_legal(self) -> bool {
        self == Domain::Legal
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MixError {
    #[error("source {0:?} has a zero token target")]
    ZeroTarget(String),
    #[error("source {0:?} is listed twice")]
    DuplicateSource(String),
    #[error("mix spec has no entries")]
    Empty,
    #[error("every source is short by more than half its target; budget unachievable")]
    Unachievable,
    #[error("no example stream for planned source {0:?}")]
    MissingStream(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub source: String,
    pub target_tokens: u64,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixEntry>", into = "Vec<MixEntry>")]
pub struct MixSpec {
    entries: Vec<MixEntry>,
}

impl TryFrom<Vec<MixEntry>> for MixSpec {
    type Error = MixError;
    fn try_from(v: Vec<MixEntry>) -> Result<Self, MixError> {
        MixSpec::new(v)
    }
}

impl From<MixSpec> for Vec<MixEntry> {
    fn from(s: MixSpec) -> Self {
        s.entries
    }
}

const M: u64 = 1_000_000;

impl MixSpec {
    pub fn new(entries: Vec<MixEntry>) -> Result<Self, MixError> {
        if entries.is_empty() {
            return Err(MixError::Empty);
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.target_tokens == 0 {
                return Err(MixError::ZeroTarget(e.source.clone()));
            }
            if !seen.insert(e.source.as_str()) {
                return Err(MixError::DuplicateSource(e.source.clone()));
            }
        }
        Ok(Self { entries })
    }

    /// The published legal/general blend: 500M legal tokens alongside 512M
    /// of chain-of-thought, chat, code and instruction data.
    pub fn reference_blend() -> Self {
        let e = |source: &str, m: u64, domain| MixEntry {
            source: source.into(),
            target_tokens: m * M,
            domain,
        };
        Self::new(vec![
            e("freelaw", 300, Domain::Legal),
            e("pile-of-law", 180, Domain::Legal),
            e("us-class-actions", 20, Domain::Legal),
            e("aqua-rat", 5, Domain::MathCot),
            e("ecqa", 4, Domain::CommonsenseCot),
            e("entailment-bank", 3, Domain::ReasoningCot),
            e("ultrachat", 140, Domain::Chat),
            e("code-feedback", 60, Domain::Code),
            e("openorca", 300, Domain::Instruction),
        ])
        .expect("static spec is valid")
    }

    pub fn entries(&self) -> &[MixEntry] {
        &self.entries
    }

    pub fn total_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.target_tokens).sum()
    }

    /// Treats targets as ratios and rescales them to `budget` tokens.
    /// Each target stays at least one token.
    pub fn scaled_to(&self, budget: u64) -> Self {
        let total = self.total_tokens() as f64;
        let entries = self
            .entries
            .iter()
            .map(|e| MixEntry {
                target_tokens: ((e.target_tokens as f64 / total) * budget as f64).round().max(1.0) as u64,
                ..e.clone()
            })
            .collect();
        Self { entries }
    }

    /// Entry whose tag equals `tag` or is its nearest slash-separated
    /// ancestor.
    pub fn entry_for(&self, tag: &str) -> Option<&MixEntry> {
        self.entries
            .iter()
            .filter(|e| {
                tag == e.source
                    || (tag.starts_with(e.source.as_str()) && tag.as_bytes().get(e.source.len()) == Some(&b'/'))
            })
            .max_by_key(|e| e.source.len())
    }

    pub fn share_of(&self, domain: Domain) -> f64 {
        let part: u64 = self
            .entries
            .iter()
            .filter(|e| e.domain == domain)
            .map(|e| e.target_tokens)
            .sum();
        part as f64 / self.total_tokens() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAvailability {
    pub tokens: u64,
    pub examples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceQuota {
    pub source: String,
    pub domain: Domain,
    pub target_tokens: u64,
    pub available_tokens: u64,
    pub quota_tokens: u64,
    pub expected_examples: u64,
    pub share: f64,
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub quotas: Vec<SourceQuota>,
    pub total_tokens: u64,
}

impl MixPlan {
    pub fn quota(&self, source: &str) -> Option<&SourceQuota> {
        self.quotas.iter().find(|q| q.source == source)
    }
}

pub fn plan_mix(spec: &MixSpec, available: &BTreeMap<String, SourceAvailability>) -> Result<MixPlan, MixError> {
    let mut quotas: Vec<SourceQuota> = spec
        .entries
        .iter()
        .map(|e| {
            let avail = available.get(&e.source).copied().unwrap_or_default();
            let quota = e.target_tokens.min(avail.tokens);
            let expected = if avail.examples == 0 || avail.tokens == 0 {
                0
            } else {
                let mean = avail.tokens as f64 / avail.examples as f64;
                ((quota as f64 / mean).ceil() as u64).min(avail.examples)
            };
            SourceQuota {
                source: e.source.clone(),
                domain: e.domain,
                target_tokens: e.target_tokens,
                available_tokens: avail.tokens,
                quota_tokens: quota,
                expected_examples: expected,
                share: 0.0,
                shortfall: avail.tokens < e.target_tokens,
            }
        })
        .collect();
    if quotas.iter().all(|q| q.available_tokens.saturating_mul(2) < q.target_tokens) {
        return Err(MixError::Unachievable);
    }
    quotas.sort_by(|a, b| a.source.cmp(&b.source));
    let total: u64 = quotas.iter().map(|q| q.quota_tokens).sum();
    for q in &mut quotas {
        q.share = q.quota_tokens as f64 / total as f64;
    }
    Ok(MixPlan {
        quotas,
        total_tokens: total,
    })
}

/// Anything with an id and a token length can be mixed.
pub trait MixItem {
    fn item_id(&self) -> &str;
    fn token_count(&self) -> u64;
}

impl MixItem for crate::transform::ComprehensionExample {
    fn item_id(&self) -> &str {
        &self.source_doc
    }
    fn token_count(&self) -> u64 {
        self.token_length as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drawn<T> {
    pub mix_source: String,
    pub domain: Domain,
    #[serde(flatten)]
    pub item: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRealized {
    pub source: String,
    pub planned_share: f64,
    pub quota_tokens: u64,
    pub drawn_examples: u64,
    pub drawn_tokens: u64,
    pub realized_share: f64,
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutcome<T> {
    pub items: Vec<Drawn<T>>,
    pub realized: Vec<SourceRealized>,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifest {
    pub seed: u64,
    pub plan: MixPlan,
    pub realized: Vec<SourceRealized>,
    pub total_tokens: u64,
    pub examples: usize,
}

impl<T> MixOutcome<T> {
    pub fn manifest(&self, plan: &MixPlan, seed: u64) -> MixManifest {
        MixManifest {
            seed,
            plan: plan.clone(),
            realized: self.realized.clone(),
            total_tokens: self.total_tokens,
            examples: self.items.len(),
        }
    }
}

fn draw_source<T: MixItem + Clone>(stream: &[T], quota: &SourceQuota, seed: u64) -> (Vec<T>, bool) {
    let mut order: Vec<usize> = (0..stream.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &quota.source));
    order.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut drawn = Vec::new();
    let mut tokens = 0u64;
    for i in order {
        if tokens >= quota.quota_tokens {
            break;
        }
        let item = &stream[i];
        if !seen.insert(item.item_id().to_string()) {
            continue;
        }
        tokens += item.token_count();
        drawn.push(item.clone());
    }
    (drawn, tokens < quota.quota_tokens)
}

/// Draws each planned source to its quota (first crossing) and interleaves
/// the result with a single seeded shuffle.
pub fn sample_mix<T>(
    streams: &BTreeMap<String, Vec<T>>,
    plan: &MixPlan,
    seed: u64,
) -> Result<MixOutcome<T>, MixError>
where
    T: MixItem + Clone + Send + Sync,
{
    for q in &plan.quotas {
        if !streams.contains_key(&q.source) && q.quota_tokens > 0 {
            return Err(MixError::MissingStream(q.source.clone()));
        }
    }
    let empty = Vec::new();
    let per_source = crate::par::map_ordered(&plan.quotas, |q| {
        draw_source(streams.get(&q.source).unwrap_or(&empty), q, seed)
    });
    let mut items = Vec::new();
    let mut realized = Vec::new();
    let mut seen = HashSet::new();
    for (q, (drawn, short)) in plan.quotas.iter().zip(per_source) {
        let mut tokens = 0;
        let mut count = 0;
        for item in drawn {
            if !seen.insert(item.item_id().to_string()) {
                continue;
            }
            tokens += item.token_count();
            count += 1;
            items.push(Drawn {
                mix_source: q.source.clone(),
                domain: q.domain,
                item,
            });
        }
        realized.push(SourceRealized {
            source: q.source.clone(),
            planned_share: q.share,
            quota_tokens: q.quota_tokens,
            drawn_examples: count,
            drawn_tokens: tokens,
            realized_share: 0.0,
            shortfall: short || q.shortfall,
        });
    }
    let total: u64 = realized.iter().map(|r| r.drawn_tokens).sum();
    for r in &mut realized {
        r.realized_share = if total == 0 {
            0.0
        } else {
            r.drawn_tokens as f64 / total as f64
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "interleave"));
    items.shuffle(&mut rng);
    Ok(MixOutcome {
        items,
        realized,
        total_tokens: total,
    })
}
