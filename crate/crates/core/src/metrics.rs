//! Classification metrics: top-1, per-class recall, shot-group accuracy and
//! distribution-estimation error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

/// Accuracy per shot group; `None` when the group has no test samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl GroupAccuracy {
    pub fn get(&self, g: ShotGroup) -> Option<f64> {
        match g {
            ShotGroup::Many => self.many,
            ShotGroup::Medium => self.medium,
            ShotGroup::Few => self.few,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class_recall: Vec<Option<f64>>,
    /// Mean over the present classes only.
    pub avg_class_recall: f64,
    pub group_acc: GroupAccuracy,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(predictions: &[usize], truths: &[usize], num_classes: usize) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!(
                "class index out of range for {num_classes} classes"
            )));
        }
        confusion[t][p] += 1;
    }
    let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
    let total = truths.len();
    let top1 = if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    };
    let per_class_recall: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
    let avg_class_recall = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalReport {
        top1,
        per_class_recall,
        avg_class_recall,
        group_acc: GroupAccuracy::default(),
        confusion,
    })
}

/// Evaluates and fills in shot-group accuracies (pooled over the test
/// samples of each group).
pub fn evaluate_with_groups(
    predictions: &[usize],
    truths: &[usize],
    groups: &[ShotGroup],
) -> Result<EvalReport> {
    let mut report = evaluate(predictions, truths, groups.len())?;
    report.group_acc = group_accuracy(&report.confusion, groups);
    Ok(report)
}

pub fn group_accuracy(confusion: &[Vec<usize>], groups: &[ShotGroup]) -> GroupAccuracy {
    let acc = |g: ShotGroup| {
        let (mut hit, mut n) = (0usize, 0usize);
        for (k, row) in confusion.iter().enumerate() {
            if groups.get(k) == Some(&g) {
                hit += row[k];
                n += row.iter().sum::<usize>();
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    };
    GroupAccuracy {
        many: acc(ShotGroup::Many),
        medium: acc(ShotGroup::Medium),
        few: acc(ShotGroup::Few),
    }
}

/// Many if `n_k > many_min`, few if `n_k <= few_max`, medium otherwise.
pub fn shot_groups(
    labeled_counts: &[usize],
    many_min: usize,
    few_max: usize,
) -> Result<Vec<ShotGroup>> {
    if many_min <= few_max {
        return Err(Error::invalid(format!(
            "many-shot threshold {many_min} must exceed few-shot threshold {few_max}"
        )));
    }
    Ok(labeled_counts
        .iter()
        .map(|&n| {
            if n > many_min {
                ShotGroup::Many
            } else if n <= few_max {
                ShotGroup::Few
            } else {
                ShotGroup::Medium
            }
        })
        .collect())
}

/// Tertile thresholds of the labeled class sizes: roughly the largest third
/// of classes are many-shot and the smallest third few-shot.
pub fn tertile_thresholds(labeled_counts: &[usize]) -> (usize, usize) {
    let mut sorted = labeled_counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let k = sorted.len();
    if k == 0 {
        return (1, 0);
    }
    let t = (k / 3).max(1).min(k - 1);
    let few_max = sorted[k - t];
    let many_min = sorted[t].max(few_max + 1);
    (many_min, few_max)
}

/// Total-variation distance between two count vectors viewed as
/// distributions.
pub fn estimation_error(true_counts: &[usize], estimated: &[usize]) -> Result<f64> {
    if true_counts.len() != estimated.len() {
        return Err(Error::invalid("count vectors differ in length"));
    }
    let st: usize = true_counts.iter().sum();
    let se: usize = estimated.iter().sum();
    if st == 0 || se == 0 {
        return Err(Error::invalid("count vectors must have positive sums"));
    }
    let tv: f64 = true_counts
        .iter()
        .zip(estimated)
        .map(|(&a, &b)| (a as f64 / st as f64 - b as f64 / se as f64).abs())
        .sum();
    Ok(0.5 * tv)
}
