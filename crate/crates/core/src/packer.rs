//! Sequence packing: whole examples, joined by a separator token, placed into
//! fixed context windows by first-fit decreasing.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OversizePolicy {
    Reject,
    #[default]
    Quarantine,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PackError {
    #[error("context_length {context_length} must exceed separator_cost {separator_cost}")]
    BadConfig { context_length: u64, separator_cost: u64 },
    #[error("examples longer than the context window: {}", .0.join(", "))]
    Oversize(Vec<String>),
    #[error("example {0:?} has zero token length")]
    ZeroLength(String),
    #[error("exact search is limited to {max} items, got {got}")]
    TooManyForExact { got: usize, max: usize },
    #[error("no packed sequences to summarize")]
    EmptyPacking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackerConfig {
    pub context_length: u64,
    #[serde(default = "default_separator")]
    pub separator_cost: u64,
    #[serde(default)]
    pub oversize_policy: OversizePolicy,
}

fn default_separator() -> u64 {
    1
}

impl PackerConfig {
    pub fn new(context_length: u64, separator_cost: u64, oversize_policy: OversizePolicy) -> Result<Self, PackError> {
        let cfg = Self {
            context_length,
            separator_cost,
            oversize_policy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ctx_2k() -> Self {
        Self::new(2048, 1, OversizePolicy::Quarantine).expect("preset")
    }

    pub fn ctx_4k() -> Self {
        Self::new(4096, 1, OversizePolicy::Quarantine).expect("preset")
    }

    pub fn validate(&self) -> Result<(), PackError> {
        if self.context_length <= self.separator_cost {
            return Err(PackError::BadConfig {
                context_length: self.context_length,
                separator_cost: self.separator_cost,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackItem {
    pub id: String,
    pub token_length: u64,
}

impl PackItem {
    pub fn new(id: impl Into<String>, token_length: u64) -> Self {
        Self {
            id: id.into(),
            token_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub example_ids: Vec<String>,
    pub total_tokens: u64,
    pub slack: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Packing {
    pub sequences: Vec<PackedSequence>,
    pub oversize: Vec<String>,
}

/// Max segment tree over per-bin room; finds the leftmost bin with room for
/// a given length in O(log n).
struct RoomTree {
    size: usize,
    node: Vec<u64>,
}

impl RoomTree {
    fn new(leaves: usize, initial: u64) -> Self {
        let size = leaves.max(1).next_power_of_two();
        Self {
            size,
            node: vec![initial; 2 * size],
        }
    }

    fn leftmost_at_least(&self, need: u64) -> Option<usize> {
        if self.node[1] < need {
            return None;
        }
        let mut i = 1;
        while i < self.size {
            i = if self.node[2 * i] >= need { 2 * i } else { 2 * i + 1 };
        }
        Some(i - self.size)
    }

    fn set(&mut self, leaf: usize, value: u64) {
        let mut i = leaf + self.size;
        self.node[i] = value;
        while i > 1 {
            i /= 2;
            self.node[i] = self.node[2 * i].max(self.node[2 * i + 1]);
        }
    }
}

fn split_oversize<'a>(items: &'a [PackItem], cfg: &PackerConfig) -> Result<(Vec<&'a PackItem>, Vec<String>), PackError> {
    cfg.validate()?;
    let mut fit = Vec::with_capacity(items.len());
    let mut over = Vec::new();
    for it in items {
        if it.token_length == 0 {
            return Err(PackError::ZeroLength(it.id.clone()));
        }
        if it.token_length > cfg.context_length {
            over.push(it.id.clone());
        } else {
            fit.push(it);
        }
    }
    if !over.is_empty() && cfg.oversize_policy == OversizePolicy::Reject {
        return Err(PackError::Oversize(over));
    }
    Ok((fit, over))
}

fn sort_desc(items: &mut [&PackItem]) {
    items.sort_by(|a, b| b.token_length.cmp(&a.token_length).then_with(|| a.id.cmp(&b.id)));
}

/// Sorts by decreasing length (ties by id) and places each example in the
/// earliest sequence that can still hold it plus one separator.
pub fn pack_greedy_sorted(items: &[PackItem], cfg: &PackerConfig) -> Result<Packing, PackError> {
    let (mut fit, oversize) = split_oversize(items, cfg)?;
    sort_desc(&mut fit);
    let cap = cfg.context_length;
    let sep = cfg.separator_cost;
    // Room of an open bin already discounts the separator the next item needs.
    let mut tree = RoomTree::new(fit.len(), cap);
    let mut sequences: Vec<PackedSequence> = Vec::new();
    for it in fit {
        let bin = tree
            .leftmost_at_least(it.token_length)
            .expect("an unopened bin always has full capacity");
        if bin == sequences.len() {
            sequences.push(PackedSequence {
                example_ids: vec![it.id.clone()],
                total_tokens: it.token_length,
                slack: 0,
            });
        } else {
            let s = &mut sequences[bin];
            s.example_ids.push(it.id.clone());
            s.total_tokens += sep + it.token_length;
        }
        let total = sequences[bin].total_tokens;
        tree.set(bin, cap.saturating_sub(total).saturating_sub(sep));
    }
    for s in &mut sequences {
        s.slack = cap - s.total_tokens;
    }
    Ok(Packing { sequences, oversize })
}

pub const EXACT_MAX_ITEMS: usize = 16;

/// Minimum number of sequences for the packable items, by branch and bound.
/// Oversize items are handled per policy and do not count.
pub fn pack_exact(items: &[PackItem], cfg: &PackerConfig) -> Result<usize, PackError> {
    if items.len() > EXACT_MAX_ITEMS {
        return Err(PackError::TooManyForExact {
            got: items.len(),
            max: EXACT_MAX_ITEMS,
        });
    }
    let (mut fit, _) = split_oversize(items, cfg)?;
    if fit.is_empty() {
        return Ok(0);
    }
    sort_desc(&mut fit);
    let lens: Vec<u64> = fit.iter().map(|i| i.token_length).collect();
    let total: u64 = lens.iter().sum();
    let lower = total.div_ceil(cfg.context_length) as usize;
    let mut best = pack_greedy_sorted(items, cfg)?.sequences.len();
    let mut loads: Vec<u64> = Vec::with_capacity(lens.len());
    search(&lens, 0, &mut loads, cfg, lower, &mut best);
    Ok(best)
}

fn search(lens: &[u64], i: usize, loads: &mut Vec<u64>, cfg: &PackerConfig, lower: usize, best: &mut usize) {
    if *best == lower {
        return;
    }
    if i == lens.len() {
        *best = (*best).min(loads.len());
        return;
    }
    let l = lens[i];
    for b in 0..loads.len() {
        if loads[..b].contains(&loads[b]) {
            continue;
        }
        if loads[b] + cfg.separator_cost + l <= cfg.context_length {
            loads[b] += cfg.separator_cost + l;
            search(lens, i + 1, loads, cfg, lower, best);
            loads[b] -= cfg.separator_cost + l;
        }
    }
    if loads.len() + 1 < *best {
        loads.push(l);
        search(lens, i + 1, loads, cfg, lower, best);
        loads.pop();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub input_count: usize,
    pub sequences: usize,
    pub sequence_reduction: f64,
    pub mean_utilization: f64,
}

pub fn compression_stats(input_count: usize, packed: &[PackedSequence], cfg: &PackerConfig) -> Result<CompressionStats, PackError> {
    if packed.is_empty() || input_count == 0 {
        return Err(PackError::EmptyPacking);
    }
    let util: f64 = packed
        .iter()
        .map(|s| s.total_tokens as f64 / cfg.context_length as f64)
        .sum::<f64>()
        / packed.len() as f64;
    Ok(CompressionStats {
        input_count,
        sequences: packed.len(),
        sequence_reduction: (1.0 - packed.len() as f64 / input_count as f64).max(0.0),
        mean_utilization: util,
    })
}

/// Packs independent shards, in parallel when the `parallel` feature is on.
/// Each shard is packed single-threaded, so results match the sequential
/// path exactly.
pub fn pack_shards(shards: &[Vec<PackItem>], cfg: &PackerConfig) -> Vec<Result<Packing, PackError>> {
    crate::par::map_ordered(shards, |s| pack_greedy_sorted(s, cfg))
}

pub fn pack_shards_sequential(shards: &[Vec<PackItem>], cfg: &PackerConfig) -> Vec<Result<Packing, PackError>> {
    crate::par::map_sequential(shards, |s| pack_greedy_sorted(s, cfg))
}
