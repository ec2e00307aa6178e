use std::collections::BTreeMap;

/// Per-run multiply-accumulate tally, bucketed by pipeline stage.
///
/// Only matrix products and convolutions increment it. Merging sub-runs is
/// explicit through [`MacCounter::merge`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    stage: &'static str,
    by_stage: BTreeMap<&'static str, u64>,
}

impl MacCounter {
    pub const DEFAULT_STAGE: &'static str = "other";

    pub fn new() -> Self {
        MacCounter {
            stage: Self::DEFAULT_STAGE,
            by_stage: BTreeMap::new(),
        }
    }

    /// Switches the bucket that subsequent increments land in; returns the
    /// previous one so callers can restore it.
    pub fn set_stage(&mut self, stage: &'static str) -> &'static str {
        std::mem::replace(&mut self.stage, stage)
    }

    pub fn stage(&self) -> &'static str {
        self.stage
    }

    pub fn add(&mut self, macs: u64) {
        if macs > 0 {
            *self.by_stage.entry(self.stage).or_insert(0) += macs;
        }
    }

    pub fn total(&self) -> u64 {
        self.by_stage.values().sum()
    }

    pub fn get(&self, stage: &str) -> u64 {
        self.by_stage.get(stage).copied().unwrap_or(0)
    }

    pub fn by_stage(&self) -> &BTreeMap<&'static str, u64> {
        &self.by_stage
    }

    pub fn merge(&mut self, other: &MacCounter) {
        for (k, v) in &other.by_stage {
            *self.by_stage.entry(k).or_insert(0) += v;
        }
    }

    pub fn reset(&mut self) {
        self.by_stage.clear();
    }
}
