//! Shared MLP encoder with two linear classifier heads.
//!
//! Every encoder layer is affine followed by ReLU, so encoder outputs are
//! nonnegative. Heads are plain affine maps producing logits. Gradients are
//! computed by hand for this fixed architecture.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Affine map `y = x·Wᵀ + b`, with `weight` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::invalid(format!(
                "bias length {} does not match {} output units",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init_uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for w in layer.weight.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-bound..=bound);
        }
        layer
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} columns, layer expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut out = x.matmul_transposed(&self.weight);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Returns parameter gradients and the gradient with respect to `x`.
    pub fn backward(&self, x: &DenseMatrix, dy: &DenseMatrix) -> Result<(Linear, DenseMatrix)> {
        if dy.rows() != x.rows() || dy.cols() != self.output_dim() || x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "backward shapes disagree: x {:?}, dy {:?}, layer {}→{}",
                x.shape(),
                dy.shape(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        let weight = dy.transpose_matmul(x);
        let mut bias = vec![0.0; self.output_dim()];
        for row in dy.iter_rows() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let dx = dy.matmul(&self.weight);
        Ok((Linear { weight, bias }, dx))
    }

    pub fn add_assign(&mut self, other: &Linear) {
        self.weight.add_assign(&other.weight);
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    fn tensors(&self) -> [&[f64]; 2] {
        [self.weight.as_slice(), &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.as_mut_slice(), &mut self.bias]
    }
}

/// Encoder layers plus the base and auxiliary heads.
///
/// The same shape doubles as the gradient container and as Adam's moment
/// buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Vec<Linear>,
    pub base_head: Linear,
    pub aux_head: Linear,
}

pub type Gradients = ModelParams;

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut encoder = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            encoder.push(Linear::init_uniform(prev, h, rng));
            prev = h;
        }
        let base_head = Linear::init_uniform(prev, num_classes, rng);
        let aux_head = Linear::init_uniform(prev, num_classes, rng);
        Self {
            encoder,
            base_head,
            aux_head,
        }
    }

    pub fn new(encoder: Vec<Linear>, base_head: Linear, aux_head: Linear) -> Result<Self> {
        let p = Self {
            encoder,
            base_head,
            aux_head,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        for pair in self.encoder.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::invalid("encoder layers do not chain"));
            }
        }
        let feat = self.feature_dim();
        if self.base_head.input_dim() != feat || self.aux_head.input_dim() != feat {
            return Err(Error::invalid(
                "head input dim differs from encoder output dim",
            ));
        }
        if self.base_head.output_dim() != self.aux_head.output_dim() {
            return Err(Error::invalid("heads disagree on the class count"));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.input_dim(), l.output_dim());
        Self {
            encoder: self.encoder.iter().map(z).collect(),
            base_head: z(&self.base_head),
            aux_head: z(&self.aux_head),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder
            .first()
            .map_or(self.base_head.input_dim(), Linear::input_dim)
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder
            .last()
            .map_or(self.base_head.input_dim(), Linear::output_dim)
    }

    pub fn num_classes(&self) -> usize {
        self.base_head.output_dim()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.encoder
            .iter()
            .chain([&self.base_head, &self.aux_head])
            .flat_map(Linear::tensors)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoder
            .iter_mut()
            .chain([&mut self.base_head, &mut self.aux_head])
            .flat_map(Linear::tensors_mut)
            .collect()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Flat copy of all parameters in `tensors()` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

/// Activations kept from an encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// Input to each layer; `inputs[0]` is the batch.
    inputs: Vec<DenseMatrix>,
    /// Pre-activation output of each layer.
    pre: Vec<DenseMatrix>,
    shapes: Vec<(usize, usize)>,
}

impl EncoderCache {
    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, DenseMatrix::rows)
    }
}

fn layer_shapes(layers: &[Linear]) -> Vec<(usize, usize)> {
    layers
        .iter()
        .map(|l| (l.input_dim(), l.output_dim()))
        .collect()
}

pub fn encoder_forward(
    params: &ModelParams,
    batch: &DenseMatrix,
) -> Result<(DenseMatrix, EncoderCache)> {
    if batch.cols() != params.input_dim() {
        return Err(Error::invalid(format!(
            "batch has {} columns, encoder expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.encoder.len());
    let mut pre = Vec::with_capacity(params.encoder.len());
    let mut h = batch.clone();
    for layer in &params.encoder {
        let z = layer.forward(&h)?;
        let mut a = z.clone();
        a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        inputs.push(h);
        pre.push(z);
        h = a;
    }
    if inputs.is_empty() {
        inputs.push(batch.clone());
    }
    let cache = EncoderCache {
        inputs,
        pre,
        shapes: layer_shapes(&params.encoder),
    };
    Ok((h, cache))
}

pub fn head_forward(head: &Linear, features: &DenseMatrix) -> Result<DenseMatrix> {
    head.forward(features)
}

/// Gradient of the encoder parameters given the gradient at its output.
pub fn encoder_backward(
    params: &ModelParams,
    cache: &EncoderCache,
    dfeatures: &DenseMatrix,
) -> Result<Vec<Linear>> {
    if cache.shapes != layer_shapes(&params.encoder) {
        return Err(Error::invalid(
            "encoder cache does not belong to these parameters",
        ));
    }
    if dfeatures.rows() != cache.rows() || dfeatures.cols() != params.feature_dim() {
        return Err(Error::invalid(format!(
            "upstream gradient {:?} does not match cached batch of {} rows",
            dfeatures.shape(),
            cache.rows()
        )));
    }
    let mut grads = vec![None; params.encoder.len()];
    let mut d = dfeatures.clone();
    for l in (0..params.encoder.len()).rev() {
        let z = &cache.pre[l];
        for (g, &zv) in d.as_mut_slice().iter_mut().zip(z.as_slice()) {
            if zv <= 0.0 {
                *g = 0.0;
            }
        }
        let (g, dx) = params.encoder[l].backward(&cache.inputs[l], &d)?;
        grads[l] = Some(g);
        d = dx;
    }
    Ok(grads.into_iter().map(|g| g.expect("filled")).collect())
}

/// Gradient of a head's parameters and of its input features.
pub fn head_backward(
    head: &Linear,
    features: &DenseMatrix,
    dlogits: &DenseMatrix,
) -> Result<(Linear, DenseMatrix)> {
    head.backward(features, dlogits)
}

/// Row-wise argmax with ties going to the smallest index.
pub fn argmax_rows(m: &DenseMatrix) -> Vec<usize> {
    m.iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
