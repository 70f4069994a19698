use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        AdamState {
            first_moment: params.iter().map(|(_, t)| zeros(t)).collect(),
            second_moment: params.iter().map(|(_, t)| zeros(t)).collect(),
            step_count: 0,
            config,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first_moment[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second_moment[index]
    }
}

/// One bias-corrected Adam update over every trainable parameter, followed by
/// zeroing the gradients.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![state.first_moment.len()],
        });
    }
    for (i, (name, t)) in params.iter().enumerate() {
        if state.first_moment[i].shape() != t.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: t.shape().to_vec(),
                right: state.first_moment[i].shape().to_vec(),
            });
        }
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::IncompleteGradient {
                name: name.to_string(),
            });
        }
    }

    state.step_count += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step_count as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);

    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        if !tensor.requires_grad() {
            continue;
        }
        let grad = tensor.take_grad().expect("checked above");
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        tensor.zero_grad();
    }
    Ok(())
}
