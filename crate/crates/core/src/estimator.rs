//! Online estimate of the unlabeled class distribution from pseudo labels.
//!
//! Each unlabeled sample contributes its latest confident pseudo label, so
//! the counts describe the dataset rather than the history of predictions.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelLedger {
    latest: HashMap<u64, usize>,
    counts: Vec<usize>,
}

impl PseudoLabelLedger {
    pub fn new(num_classes: usize) -> Self {
        Self {
            latest: HashMap::new(),
            counts: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Sets the latest label of `sample_id`, replacing any earlier one.
    pub fn record(&mut self, sample_id: u64, label: usize) -> Result<()> {
        if label >= self.counts.len() {
            return Err(Error::invalid(format!(
                "pseudo label {label} out of range for {} classes",
                self.counts.len()
            )));
        }
        if let Some(prev) = self.latest.insert(sample_id, label) {
            self.counts[prev] -= 1;
        }
        self.counts[label] += 1;
        Ok(())
    }

    /// Raw per-class counts M̃.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn latest(&self, sample_id: u64) -> Option<usize> {
        self.latest.get(&sample_id).copied()
    }

    /// Number of distinct samples recorded.
    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn estimated_counts(&self, clamp_min: usize) -> Vec<usize> {
        self.counts.iter().map(|&c| c.max(clamp_min)).collect()
    }

    /// Smallest clamped count (floor 1): the estimated size of the rarest class.
    pub fn min_count(&self) -> usize {
        self.estimated_counts(1).into_iter().min().unwrap_or(1)
    }

    /// `(sample_id, latest label)` pairs in unspecified order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, usize)> + '_ {
        self.latest.iter().map(|(&id, &k)| (id, k))
    }
}

/// Appends `epoch,class,estimated_count,true_count` rows. `true_count` is
/// left empty when no ground truth is available.
pub fn write_estimate_snapshot<W: Write>(
    out: &mut W,
    epoch: usize,
    estimated: &[usize],
    truth: Option<&[usize]>,
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(out, "epoch,class,estimated_count,true_count")?;
    }
    for (k, m) in estimated.iter().enumerate() {
        match truth.and_then(|t| t.get(k)) {
            Some(t) => writeln!(out, "{epoch},{k},{m},{t}")?,
            None => writeln!(out, "{epoch},{k},{m},")?,
        }
    }
    Ok(())
}
