use std::collections::BTreeMap;

use crate::model::ModelWeights;
use crate::tensor::{Tensor, TensorError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at 1-based step `t`.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    t: u64,
    lr: f64,
) -> Result<(), TensorError> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(TensorError::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moments",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

/// Adam over named model parameters. Parameters without a gradient entry
/// are left untouched.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        weights: &mut ModelWeights,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<(), TensorError> {
        self.step += 1;
        for (name, g) in grads {
            let p = weights
                .params
                .get_mut(name)
                .ok_or_else(|| TensorError::Dimension(format!("adam: unknown parameter '{name}'")))?;
            let state = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments::zeros(g.numel()));
            let mut value = p.value.clone();
            adam_step(value.data_mut(), g.data(), state, self.step, lr)?;
            p.value = value;
        }
        Ok(())
    }
}
