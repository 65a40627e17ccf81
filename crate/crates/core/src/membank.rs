//! Class-rebalanced feature memory bank.
//!
//! The bank stores encoder features with their pseudo labels, one list per
//! class. With `C_k` records of class `k` stored:
//!
//! * **enqueue** accepts an arrival with probability `1 / C_k^β` (1 when the
//!   class is empty). An accepted arrival into a full bank first triggers a
//!   single dequeue.
//! * **dequeue** picks a victim class with probability proportional to
//!   `1 - 1 / C_k^β` and removes that class's oldest record. When every
//!   weight is zero (β = 0, or only singleton classes) each stored record is
//!   equally likely to be evicted.
//! * **get** draws records with replacement, class `k` with probability
//!   proportional to `1 / M̃_k^λ` over the non-empty classes, where `M̃` is the
//!   estimated unlabeled class distribution.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceView {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature: Vec<f64>,
    pub pseudo_label: usize,
    pub confidence: f64,
    pub step: u64,
    pub source_view: SourceView,
}

/// `P_in = 1 / C^β`, with `P_in = 1` for an empty class.
pub fn insert_probability(count: usize, beta: f64) -> f64 {
    if count == 0 {
        1.0
    } else {
        (count as f64).powf(-beta)
    }
}

/// Unnormalized eviction weight `1 - 1 / C^β`; zero for an empty class.
pub fn eviction_weight(count: usize, beta: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        1.0 - (count as f64).powf(-beta)
    }
}

/// Normalized victim-class distribution, including the per-record fallback.
pub fn eviction_distribution(counts: &[usize], beta: f64) -> Vec<f64> {
    let mut w: Vec<f64> = counts.iter().map(|&c| eviction_weight(c, beta)).collect();
    let mut total: f64 = w.iter().sum();
    if total <= 0.0 {
        w = counts.iter().map(|&c| c as f64).collect();
        total = w.iter().sum();
    }
    if total <= 0.0 {
        return vec![0.0; counts.len()];
    }
    w.iter().map(|v| v / total).collect()
}

/// Normalized get distribution: `∝ 1 / M̃_k^λ` over classes with `C_k > 0`.
/// Estimated counts below 1 are treated as 1.
pub fn get_distribution(estimated: &[usize], counts: &[usize], lambda: f64) -> Vec<f64> {
    let w: Vec<f64> = estimated
        .iter()
        .zip(counts)
        .map(|(&m, &c)| {
            if c > 0 {
                (m.max(1) as f64).powf(-lambda)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return vec![0.0; counts.len()];
    }
    w.iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    beta: f64,
    per_class: Vec<Vec<FeatureRecord>>,
}

impl MemoryBank {
    pub fn new(num_classes: usize, capacity: usize, beta: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("memory bank needs at least one class"));
        }
        if capacity == 0 {
            return Err(Error::invalid("memory bank capacity must be at least 1"));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!(
                "beta must be finite and >= 0, got {beta}"
            )));
        }
        Ok(Self {
            capacity,
            beta,
            per_class: vec![Vec::new(); num_classes],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_class.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &FeatureRecord> {
        self.per_class.iter().flatten()
    }

    /// Bernoulli admission of one record; returns whether it was stored.
    pub fn enqueue<R: Rng + ?Sized>(&mut self, record: FeatureRecord, rng: &mut R) -> Result<bool> {
        let k = record.pseudo_label;
        if k >= self.num_classes() {
            return Err(Error::invalid(format!(
                "pseudo label {k} out of range for {} classes",
                self.num_classes()
            )));
        }
        let p = insert_probability(self.per_class[k].len(), self.beta);
        if rng.random::<f64>() >= p {
            return Ok(false);
        }
        if self.len() >= self.capacity {
            self.dequeue(rng)?;
        }
        self.per_class[k].push(record);
        Ok(true)
    }

    /// Evicts one record: victim class by eviction weight, oldest within class.
    pub fn dequeue<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<FeatureRecord> {
        if self.is_empty() {
            return Err(Error::Empty("memory bank"));
        }
        let probs = eviction_distribution(&self.counts(), self.beta);
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;
        let class = dist.sample(rng);
        let list = &mut self.per_class[class];
        let oldest = list
            .iter()
            .enumerate()
            .min_by_key(|(i, r)| (r.step, *i))
            .map(|(i, _)| i)
            .expect("victim class is non-empty");
        Ok(list.remove(oldest))
    }

    /// Draws `n` records with replacement by reversed sampling. Empty bank
    /// yields an empty vector.
    pub fn get<R: Rng + ?Sized>(
        &self,
        estimated_counts: &[usize],
        n: usize,
        lambda: f64,
        rng: &mut R,
    ) -> Result<Vec<&FeatureRecord>> {
        if estimated_counts.len() != self.num_classes() {
            return Err(Error::invalid(format!(
                "{} estimated counts for {} classes",
                estimated_counts.len(),
                self.num_classes()
            )));
        }
        if self.is_empty() || n == 0 {
            return Ok(Vec::new());
        }
        let probs = get_distribution(estimated_counts, &self.counts(), lambda);
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;
        Ok((0..n)
            .map(|_| {
                let list = &self.per_class[dist.sample(rng)];
                &list[rng.random_range(0..list.len())]
            })
            .collect())
    }

    /// Normalized Shannon entropy of the class occupancy, in `[0, 1]`.
    pub fn balance_entropy(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty("memory bank"));
        }
        Ok(normalized_entropy(&self.counts()))
    }
}

/// `H(c / Σc) / ln K` over the non-zero support.
pub fn normalized_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return 0.0;
    }
    let t = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    h / (counts.len() as f64).ln()
}

/// Appends `epoch,class,count` rows; writes the header when `header` is set.
pub fn write_counts_snapshot<W: Write>(
    out: &mut W,
    epoch: usize,
    counts: &[usize],
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(out, "epoch,class,count")?;
    }
    for (k, c) in counts.iter().enumerate() {
        writeln!(out, "{epoch},{k},{c}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    pub(crate) fn rec(label: usize, step: u64) -> FeatureRecord {
        FeatureRecord {
            feature: vec![label as f64, step as f64],
            pseudo_label: label,
            confidence: 0.99,
            step,
            source_view: SourceView::Strong,
        }
    }

    fn bank_with(counts: &[usize], capacity: usize, beta: f64) -> MemoryBank {
        let mut b = MemoryBank::new(counts.len(), capacity, beta).unwrap();
        let mut step = 0;
        for (k, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                b.per_class[k].push(rec(k, step));
                step += 1;
            }
        }
        b
    }

    #[test]
    fn insert_probability_edges() {
        for beta in [0.0, 1.0, 3.5] {
            assert_eq!(insert_probability(0, beta), 1.0);
            assert_eq!(insert_probability(1, beta), 1.0);
            assert_eq!(insert_probability(17, 0.0), 1.0);
        }
        assert_eq!(insert_probability(4, 1.0), 0.25);
    }

    #[test]
    fn enqueue_acceptance_rate() {
        let mut rng = StreamRng::seed_from_u64(4);
        let base = bank_with(&[4, 0], 100, 1.0);
        let trials = 100_000;
        let mut accepted = 0;
        for _ in 0..trials {
            let mut b = base.clone();
            if b.enqueue(rec(0, 99), &mut rng).unwrap() {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / trials as f64;
        assert!((rate - 0.25).abs() < 0.01, "{rate}");
    }

    #[test]
    fn enqueue_rejects_bad_label() {
        let mut b = MemoryBank::new(2, 4, 1.0).unwrap();
        assert!(b
            .enqueue(rec(2, 0), &mut StreamRng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn dequeue_only_nonzero_weight() {
        let mut rng = StreamRng::seed_from_u64(5);
        let base = bank_with(&[10, 1], 11, 1.0);
        for _ in 0..1000 {
            let mut b = base.clone();
            assert_eq!(b.dequeue(&mut rng).unwrap().pseudo_label, 0);
        }
    }

    #[test]
    fn dequeue_removes_oldest() {
        let mut b = bank_with(&[3], 3, 1.0);
        b.per_class[0].swap(0, 2);
        let r = b.dequeue(&mut StreamRng::seed_from_u64(0)).unwrap();
        assert_eq!(r.step, 0);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn dequeue_frequencies() {
        let mut rng = StreamRng::seed_from_u64(6);
        for (counts, beta, expect) in [
            (vec![5usize, 5], 0.0, 0.5),
            (vec![100, 10], 1.0, 0.523_809_523_809_523_8),
        ] {
            let base = bank_with(&counts, 1000, beta);
            let trials = 100_000;
            let mut hits = 0;
            for _ in 0..trials {
                let mut b = base.clone();
                if b.dequeue(&mut rng).unwrap().pseudo_label == 0 {
                    hits += 1;
                }
            }
            let f = hits as f64 / trials as f64;
            assert!((f - expect).abs() < 0.01, "{counts:?}: {f}");
        }
    }

    #[test]
    fn dequeue_empty_is_error() {
        let mut b = MemoryBank::new(3, 2, 1.0).unwrap();
        assert!(matches!(
            b.dequeue(&mut StreamRng::seed_from_u64(0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn get_distributions() {
        assert_eq!(
            get_distribution(&[5, 900, 3], &[1, 2, 3], 0.0),
            vec![1.0 / 3.0; 3]
        );
        let p = get_distribution(&[100, 10], &[3, 3], 1.0);
        assert!((p[0] - 1.0 / 11.0).abs() < 1e-15 && (p[1] - 10.0 / 11.0).abs() < 1e-15);

        let b = bank_with(&[30, 30], 100, 1.0);
        let mut rng = StreamRng::seed_from_u64(8);
        let draws = b.get(&[100, 10], 100_000, 1.0, &mut rng).unwrap();
        let f0 = draws.iter().filter(|r| r.pseudo_label == 0).count() as f64 / 1e5;
        assert!((f0 - 1.0 / 11.0).abs() < 0.01, "{f0}");
    }

    #[test]
    fn get_restricted_to_nonempty() {
        let b = bank_with(&[0, 0, 0, 5], 10, 1.0);
        let mut rng = StreamRng::seed_from_u64(1);
        let draws = b.get(&[1, 1, 1, 1000], 50, 2.0, &mut rng).unwrap();
        assert_eq!(draws.len(), 50);
        assert!(draws.iter().all(|r| r.pseudo_label == 3));
        let empty = MemoryBank::new(2, 3, 1.0).unwrap();
        assert!(empty.get(&[1, 1], 5, 1.0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn counts_and_entropy() {
        let mut b = MemoryBank::new(3, 5, 1.0).unwrap();
        assert_eq!(b.counts(), vec![0, 0, 0]);
        assert!(b.balance_entropy().is_err());
        b.enqueue(rec(2, 0), &mut StreamRng::seed_from_u64(0))
            .unwrap();
        assert_eq!(b.counts(), vec![0, 0, 1]);
        assert_eq!(b.balance_entropy().unwrap(), 0.0);

        assert!((bank_with(&[4, 4, 4], 20, 1.0).balance_entropy().unwrap() - 1.0).abs() < 1e-15);
        let h = bank_with(&[3, 1], 20, 1.0).balance_entropy().unwrap();
        assert!((h - 0.811_278_124_459_132_9).abs() < 1e-12);
    }

    #[test]
    fn snapshot_rows() {
        let mut buf = Vec::new();
        write_counts_snapshot(&mut buf, 3, &[2, 0], true).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,class,count\n3,0,2\n3,1,0\n"
        );
    }
}
