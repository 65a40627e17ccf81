use serde::{Deserialize, Serialize};

use super::network::{Gradients, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step_count: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(Error::invalid(
            "gradient or moment shapes differ from parameters",
        ));
    }
    if !grads.is_finite() {
        return Err(Error::Diverged {
            step: state.step_count + 1,
            reason: "non-finite gradient".into(),
        });
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);

    let m = state.first_moment.tensors_mut();
    let v = state.second_moment.tensors_mut();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m)
        .zip(v)
    {
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Exponential moving average of the model parameters, used for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaParams {
    pub shadow: ModelParams,
    pub decay: f64,
}

impl EmaParams {
    pub fn new(params: &ModelParams, decay: f64) -> Self {
        Self {
            shadow: params.clone(),
            decay,
        }
    }
}

pub fn ema_update(ema: &mut EmaParams, params: &ModelParams) -> Result<()> {
    if !ema.shadow.same_shape(params) {
        return Err(Error::invalid("EMA shadow shape differs from parameters"));
    }
    let d = ema.decay;
    for (e, p) in ema.shadow.tensors_mut().into_iter().zip(params.tensors()) {
        for (e, &p) in e.iter_mut().zip(p) {
            *e = d * *e + (1.0 - d) * p;
        }
    }
    Ok(())
}
