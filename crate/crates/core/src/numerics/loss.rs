use super::matrix::DenseMatrix;
use super::network::softmax_in_place;
use crate::error::{Error, Result};

/// Weighted, masked softmax cross-entropy.
///
/// `loss = (1/divisor) · Σ_i mask_i · w_i · H(t_i, softmax(z_i))`. The
/// divisor is fixed by the caller (the batch size) and does not shrink when
/// the mask removes rows. Returns the loss and its exact gradient with
/// respect to `logits`.
pub fn weighted_masked_ce(
    logits: &DenseMatrix,
    targets: &[usize],
    weights: &[f64],
    mask: &[bool],
    divisor: usize,
) -> Result<(f64, DenseMatrix)> {
    let n = logits.rows();
    if targets.len() != n || weights.len() != n || mask.len() != n {
        return Err(Error::invalid(format!(
            "{n} logit rows but {} targets, {} weights, {} mask entries",
            targets.len(),
            weights.len(),
            mask.len()
        )));
    }
    if divisor == 0 {
        return Err(Error::invalid("loss divisor must be positive"));
    }
    let k = logits.cols();
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!(
            "target {t} out of range for {k} classes"
        )));
    }

    let inv = 1.0 / divisor as f64;
    let mut loss = 0.0;
    let mut grad = DenseMatrix::zeros(n, k);
    for i in 0..n {
        if !mask[i] || weights[i] == 0.0 {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let t = targets[i];
        let scale = weights[i] * inv;
        loss += scale * (lse - row[t]);

        let g = grad.row_mut(i);
        g.copy_from_slice(row);
        softmax_in_place(g);
        g[t] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss, grad))
}

/// Plain mean cross-entropy over all rows.
pub fn mean_ce(logits: &DenseMatrix, targets: &[usize]) -> Result<(f64, DenseMatrix)> {
    let n = logits.rows();
    if n == 0 {
        return Ok((0.0, DenseMatrix::zeros(0, logits.cols())));
    }
    weighted_masked_ce(logits, targets, &vec![1.0; n], &vec![true; n], n)
}
