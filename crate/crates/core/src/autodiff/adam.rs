//! Adam optimizer with bias correction.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. The defaults are the community-standard constants.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamParams { learning_rate, ..AdamParams::default() }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], hyper: AdamParams) -> Self {
        let first = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let second = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState { hyper, step_count: 0, first_moment: first, second_moment: second }
    }
}

/// One Adam update in place. The learning rate is read from `state.hyper`
/// on every call, so schedules can adjust it between steps.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Contract(format!(
            "adam_step arity mismatch: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::Contract(format!("adam_step shape mismatch at parameter {i}")));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let h = &state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);

    for i in 0..params.len() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let g = grads[i].data();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
            if !p[j].is_finite() {
                return Err(Error::OptimizationStalled(format!(
                    "adam produced a non-finite parameter at step {}",
                    state.step_count
                )));
            }
        }
    }
    Ok(())
}
