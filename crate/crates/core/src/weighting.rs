//! Adaptive per-sample loss weights `(min_k n_k / n_y)^α` for the auxiliary
//! head.

use crate::error::{Error, Result};

fn ratio_weight(counts: &[usize], class: usize, alpha: f64) -> Result<f64> {
    let n_y = *counts.get(class).ok_or_else(|| {
        Error::invalid(format!(
            "class {class} out of range for {} classes",
            counts.len()
        ))
    })?;
    if counts.contains(&0) {
        return Err(Error::invalid("class counts must all be at least 1"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    let min = *counts.iter().min().expect("non-empty");
    Ok((min as f64 / n_y as f64).powf(alpha))
}

/// Weight of a labeled sample of class `y` given labeled class sizes.
pub fn labeled_weight(labeled_counts: &[usize], y: usize, alpha: f64) -> Result<f64> {
    ratio_weight(labeled_counts, y, alpha)
}

/// Weight of an unlabeled sample pseudo-labeled `q_hat`, given the clamped
/// estimated unlabeled counts.
pub fn unlabeled_weight(estimated_counts: &[usize], q_hat: usize, alpha: f64) -> Result<f64> {
    ratio_weight(estimated_counts, q_hat, alpha)
}

/// Weights for every class at once.
pub fn class_weights(counts: &[usize], alpha: f64) -> Result<Vec<f64>> {
    (0..counts.len())
        .map(|k| ratio_weight(counts, k, alpha))
        .collect()
}
