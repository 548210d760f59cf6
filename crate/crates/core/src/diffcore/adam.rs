use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::Tensor;
use crate::error::{DarlError, Result};

/// Learning rate and moment decay rates of one Adam parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            cfg,
        }
    }
}

/// One bias-corrected Adam update of `params` from its accumulated gradient.
pub fn adam_step(params: &mut Tensor, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.numel() {
        return Err(DarlError::dim(
            "adam_step",
            format!("state length {} vs parameter length {}", state.m.len(), params.numel()),
        ));
    }
    let grad = params
        .grad()
        .ok_or_else(|| DarlError::Contract("adam_step on a tensor without a gradient".into()))?
        .to_vec();
    let AdamConfig { lr, beta1, beta2, eps } = state.cfg;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(&grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
