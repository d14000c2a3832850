use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TaskType;
use crate::hashing::stable_hash64;
use crate::ingest::RawDocument;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectError {
    #[error("task weights are all zero")]
    AllZero,
    #[error("task weight for {0} is negative or not finite")]
    InvalidWeight(TaskType),
    #[error("cot-augmentation is reserved for general-domain data")]
    CotInLegalPolicy,
    #[error("tasks_per_doc must be at least 1")]
    ZeroTasks,
}

/// Per-task sampling weights for legal passages, and how many distinct
/// tasks each passage receives.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPolicy {
    weights: BTreeMap<TaskType, f64>,
    tasks_per_doc: usize,
}

impl TaskPolicy {
    pub fn new(weights: BTreeMap<TaskType, f64>, tasks_per_doc: usize) -> Result<Self, SelectError> {
        for (&t, &w) in &weights {
            if !w.is_finite() || w < 0.0 {
                return Err(SelectError::InvalidWeight(t));
            }
            if t == TaskType::CotAugmentation && w > 0.0 {
                return Err(SelectError::CotInLegalPolicy);
            }
        }
        if weights.values().all(|&w| w == 0.0) {
            return Err(SelectError::AllZero);
        }
        if tasks_per_doc == 0 {
            return Err(SelectError::ZeroTasks);
        }
        Ok(Self {
            weights,
            tasks_per_doc,
        })
    }

    pub fn uniform(tasks_per_doc: usize) -> Self {
        let weights = TaskType::LEGAL.iter().map(|&t| (t, 1.0)).collect();
        Self::new(weights, tasks_per_doc).expect("uniform policy is valid")
    }

    pub fn weights(&self) -> &BTreeMap<TaskType, f64> {
        &self.weights
    }

    pub fn tasks_per_doc(&self) -> usize {
        self.tasks_per_doc
    }
}

/// Draws `min(tasks_per_doc, #positive weights)` distinct task types by
/// successive weighted draws without replacement. The stream is keyed by
/// `(seed, doc.id)`, so the result does not depend on processing order.
pub fn select_tasks(doc: &RawDocument, policy: &TaskPolicy, seed: u64) -> Vec<TaskType> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(&[
        &seed.to_le_bytes(),
        b"select",
        doc.id.as_bytes(),
    ]));
    let mut pool: Vec<(TaskType, f64)> = policy
        .weights
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(&t, &w)| (t, w))
        .collect();
    let k = policy.tasks_per_doc.min(pool.len());
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut x = rng.random::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (i, (_, w)) in pool.iter().enumerate() {
            if x < *w {
                pick = i;
                break;
            }
            x -= w;
        }
        out.push(pool.remove(pick).0);
    }
    out
}
