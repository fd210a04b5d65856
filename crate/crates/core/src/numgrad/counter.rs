use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Pipeline stage an op is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Select,
    Encode,
    Decode,
    Aggregate,
    Loss,
    Baseline,
    Other,
}

/// Multiply-accumulate counts per stage, plus selection-specific tallies.
///
/// Matrix products count `m*k*n`; every other op counts a small constant per
/// output element. Counts depend only on shapes, never on values or timing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    macs: BTreeMap<Stage, u64>,
    /// Point-to-set distance evaluations (one per template row per update).
    pub distance_evals: u64,
    /// Gumbel-Softmax draws.
    pub sampling_steps: u64,
}

impl OpCounter {
    pub fn add(&mut self, stage: Stage, macs: u64) {
        *self.macs.entry(stage).or_insert(0) += macs;
    }

    pub fn get(&self, stage: Stage) -> u64 {
        self.macs.get(&stage).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.macs.values().sum()
    }

    /// Sum over the stages of the fusion path (select, encode, decode, aggregate).
    pub fn fuse_total(&self) -> u64 {
        [Stage::Select, Stage::Encode, Stage::Decode, Stage::Aggregate]
            .iter()
            .map(|s| self.get(*s))
            .sum()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}
