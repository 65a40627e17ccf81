#![allow(dead_code)]

use bmb::numerics::{DenseMatrix, Linear, ModelParams};
use bmb::trainer::{step_losses, LossCoefficients, StepBatch};
use rand::Rng;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

pub fn random_params<R: Rng>(rng: &mut R, d: usize, hidden: &[usize], k: usize) -> ModelParams {
    ModelParams::init(d, hidden, k, rng)
}

/// Which loss terms a randomized batch exercises.
#[derive(Debug, Clone, Copy)]
pub struct Paths {
    pub labeled: bool,
    pub unlabeled: bool,
    pub memory: bool,
    pub aux: bool,
}

/// A batch with random inputs, labels, masks and weights. Memory features are
/// nonnegative like real encoder outputs.
pub fn random_batch<R: Rng>(
    rng: &mut R,
    params: &ModelParams,
    b: usize,
    paths: Paths,
) -> StepBatch {
    let d = params.input_dim();
    let f = params.feature_dim();
    let k = params.num_classes();
    let rows = |on: bool| if on { b } else { 0 };
    let nl = rows(paths.labeled);
    let nu = rows(paths.unlabeled);
    let nm = rows(paths.memory);
    let mut mask: Vec<bool> = (0..nu).map(|_| rng.random_bool(0.6)).collect();
    if let Some(m) = mask.first_mut() {
        *m = true;
    }
    let memory_x = DenseMatrix::new(
        nm,
        f,
        (0..nm * f).map(|_| rng.random_range(0.0..2.0)).collect(),
    )
    .unwrap();
    StepBatch {
        labeled_x: random_matrix(rng, nl, d, 2.0),
        labeled_y: (0..nl).map(|_| rng.random_range(0..k)).collect(),
        labeled_w: (0..nl).map(|_| rng.random_range(0.05..1.0)).collect(),
        strong_x: random_matrix(rng, nu, d, 2.0),
        base_targets: (0..nu).map(|_| rng.random_range(0..k)).collect(),
        base_mask: mask.clone(),
        aux_targets: (0..nu).map(|_| rng.random_range(0..k)).collect(),
        aux_weights: (0..nu).map(|_| rng.random_range(0.05..1.0)).collect(),
        aux_mask: mask
            .into_iter()
            .map(|m| m && rng.random_bool(0.8))
            .collect(),
        memory_x,
        memory_y: (0..nm).map(|_| rng.random_range(0..k)).collect(),
    }
}

fn perturb(p: &mut ModelParams, index: usize, delta: f64) {
    let mut i = index;
    for t in p.tensors_mut() {
        if i < t.len() {
            t[i] += delta;
            return;
        }
        i -= t.len();
    }
    panic!("parameter index {index} out of range");
}

/// Central-difference gradient of `loss_total`.
pub fn numeric_gradient(
    params: &ModelParams,
    batch: &StepBatch,
    coeffs: &LossCoefficients,
    h: f64,
) -> Vec<f64> {
    let n = params.flatten().len();
    let mut p = params.clone();
    (0..n)
        .map(|i| {
            perturb(&mut p, i, h);
            let up = step_losses(&p, batch, coeffs).unwrap().0.loss_total;
            perturb(&mut p, i, -2.0 * h);
            let down = step_losses(&p, batch, coeffs).unwrap().0.loss_total;
            perturb(&mut p, i, h);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error between the analytic and numeric gradients of one batch.
pub fn gradient_check(params: &ModelParams, batch: &StepBatch, coeffs: &LossCoefficients) -> f64 {
    let (_, grads) = step_losses(params, batch, coeffs).unwrap();
    let numeric = numeric_gradient(params, batch, coeffs, 1e-5);
    relative_error(&grads.flatten(), &numeric)
}

pub fn linear(rows: &[&[f64]], bias: &[f64]) -> Linear {
    Linear::new(DenseMatrix::from_rows(rows).unwrap(), bias.to_vec()).unwrap()
}
