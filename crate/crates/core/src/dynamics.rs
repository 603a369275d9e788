//! Lorenz-96 forecast model: tendency, fixed-step RK4 integration and the
//! reverse-mode gradient of a cost through the integrated trajectory.
//!
//! The model is the standard cyclic Lorenz-96 system
//! `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`, integrated with the
//! classical fourth-order Runge-Kutta scheme. One data-assimilation interval
//! is `steps_per_da_interval` RK4 steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Any state component beyond this magnitude aborts integration.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// Cap on stored RK4 stages in a single reverse pass.
const MAX_ADJOINT_STEPS: usize = 10_000;

/// Static description of the forecast model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of grid points (state dimension).
    pub n_x: usize,
    /// Forcing parameter F.
    pub forcing: f64,
    /// Integration step in model time units.
    pub dt: f64,
    /// RK4 steps per data-assimilation interval.
    pub steps_per_da_interval: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_x < 4 {
            return Err(Error::Config(format!(
                "n_x must be >= 4 for cyclic coupling, got {}",
                self.n_x
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps_per_da_interval == 0 {
            return Err(Error::Config("steps_per_da_interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Same model with a different forcing (used by forcing schedules).
    pub fn with_forcing(&self, forcing: f64) -> ModelConfig {
        ModelConfig { forcing, ..self.clone() }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { n_x: 40, forcing: 8.0, dt: 0.05, steps_per_da_interval: 2 }
    }
}

/// Model-space state: one real value per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("state vector contains non-finite values".into()));
        }
        Ok(StateVector(values))
    }

    pub fn zeros(n: usize) -> Self {
        StateVector(vec![0.0; n])
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        StateVector(vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// A sequence of states produced by repeated `rk4_step` calls.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<StateVector>,
    pub start_time: i64,
    pub dt: f64,
}

impl Trajectory {
    pub fn last(&self) -> &StateVector {
        self.states.last().expect("trajectory is never empty")
    }
}

fn check_dim(state: &StateVector, config: &ModelConfig) -> Result<()> {
    if state.len() != config.n_x {
        return Err(Error::Config(format!(
            "state length {} does not match n_x {}",
            state.len(),
            config.n_x
        )));
    }
    Ok(())
}

/// Instantaneous Lorenz-96 tendency.
pub fn tendency(state: &StateVector, config: &ModelConfig) -> Result<StateVector> {
    check_dim(state, config)?;
    Ok(StateVector(tendency_raw(state.values(), config)))
}

fn tendency_raw(x: &[f64], config: &ModelConfig) -> Vec<f64> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for i in 0..n {
        let ip1 = (i + 1) % n;
        let im1 = (i + n - 1) % n;
        let im2 = (i + n - 2) % n;
        dx[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + config.forcing;
    }
    dx
}

/// Transpose-Jacobian product of the tendency at `x` applied to `w`.
fn tendency_vjp(x: &[f64], w: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let ip1 = (i + 1) % n;
        let im1 = (i + n - 1) % n;
        let im2 = (i + n - 2) % n;
        out[ip1] += w[i] * x[im1];
        out[im2] -= w[i] * x[im1];
        out[im1] += w[i] * (x[ip1] - x[im2]);
        out[i] -= w[i];
    }
    out
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Stage inputs of one RK4 step, kept for the reverse pass.
struct Rk4Stages {
    x: Vec<f64>,
    u2: Vec<f64>,
    u3: Vec<f64>,
    u4: Vec<f64>,
}

fn rk4_step_raw(x: &[f64], config: &ModelConfig) -> (Vec<f64>, Rk4Stages) {
    let dt = config.dt;
    let k1 = tendency_raw(x, config);
    let mut u2 = x.to_vec();
    axpy(&mut u2, 0.5 * dt, &k1);
    let k2 = tendency_raw(&u2, config);
    let mut u3 = x.to_vec();
    axpy(&mut u3, 0.5 * dt, &k2);
    let k3 = tendency_raw(&u3, config);
    let mut u4 = x.to_vec();
    axpy(&mut u4, dt, &k3);
    let k4 = tendency_raw(&u4, config);

    let mut next = x.to_vec();
    for i in 0..x.len() {
        next[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    (next, Rk4Stages { x: x.to_vec(), u2, u3, u4 })
}

fn check_blowup(values: &[f64], step: usize) -> Result<()> {
    for &v in values {
        if !v.is_finite() || v.abs() > BLOWUP_LIMIT {
            return Err(Error::IntegrationBlowup { step, value: v, limit: BLOWUP_LIMIT });
        }
    }
    Ok(())
}

/// One classical RK4 step of length `dt`.
pub fn rk4_step(state: &StateVector, config: &ModelConfig) -> Result<StateVector> {
    check_dim(state, config)?;
    let (next, _) = rk4_step_raw(state.values(), config);
    check_blowup(&next, 1)?;
    Ok(StateVector(next))
}

/// Integrate `n_steps` RK4 steps, returning the full trajectory
/// (`n_steps + 1` states including the initial one).
pub fn forecast(state: &StateVector, n_steps: usize, config: &ModelConfig) -> Result<Trajectory> {
    check_dim(state, config)?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(state.clone());
    let mut current = state.values().to_vec();
    for step in 1..=n_steps {
        let (next, _) = rk4_step_raw(&current, config);
        check_blowup(&next, step)?;
        states.push(StateVector(next.clone()));
        current = next;
    }
    Ok(Trajectory { states, start_time: 0, dt: config.dt })
}

/// Final state of an `n_steps` forecast, without keeping the trajectory.
pub fn forecast_state(
    state: &StateVector,
    n_steps: usize,
    config: &ModelConfig,
) -> Result<StateVector> {
    check_dim(state, config)?;
    let mut current = state.values().to_vec();
    for step in 1..=n_steps {
        let (next, _) = rk4_step_raw(&current, config);
        check_blowup(&next, step)?;
        current = next;
    }
    Ok(StateVector(current))
}

/// Pull a cost gradient at the end of an `n_steps` forecast back to the
/// initial state by reverse accumulation through every RK4 stage.
///
/// Given `g = d(cost)/d(x_end)`, returns `d(cost)/d(x_0)` where
/// `x_end = rk4_step^n(x_0)`. All stage values are stored for the window.
pub fn forecast_gradient(
    state: &StateVector,
    n_steps: usize,
    cost_grad_at_end: &StateVector,
    config: &ModelConfig,
) -> Result<StateVector> {
    check_dim(state, config)?;
    check_dim(cost_grad_at_end, config)?;
    if n_steps > MAX_ADJOINT_STEPS {
        return Err(Error::Resource(format!(
            "reverse pass over {} steps exceeds the {} step storage cap",
            n_steps, MAX_ADJOINT_STEPS
        )));
    }

    let mut stages = Vec::with_capacity(n_steps);
    let mut current = state.values().to_vec();
    for step in 1..=n_steps {
        let (next, stage) = rk4_step_raw(&current, config);
        check_blowup(&next, step)?;
        stages.push(stage);
        current = next;
    }

    let mut adj = cost_grad_at_end.values().to_vec();
    for stage in stages.iter().rev() {
        adj = rk4_step_vjp(stage, &adj, config);
    }
    Ok(StateVector(adj))
}

/// Adjoint of one RK4 step given its stored stage inputs.
fn rk4_step_vjp(stage: &Rk4Stages, g: &[f64], config: &ModelConfig) -> Vec<f64> {
    let dt = config.dt;
    let n = g.len();

    // a4 = dJ/dk4
    let mut a4 = vec![0.0; n];
    axpy(&mut a4, dt / 6.0, g);
    let w4 = tendency_vjp(&stage.u4, &a4);

    let mut a3 = vec![0.0; n];
    axpy(&mut a3, dt / 3.0, g);
    axpy(&mut a3, dt, &w4);
    let w3 = tendency_vjp(&stage.u3, &a3);

    let mut a2 = vec![0.0; n];
    axpy(&mut a2, dt / 3.0, g);
    axpy(&mut a2, 0.5 * dt, &w3);
    let w2 = tendency_vjp(&stage.u2, &a2);

    let mut a1 = vec![0.0; n];
    axpy(&mut a1, dt / 6.0, g);
    axpy(&mut a1, 0.5 * dt, &w2);
    let w1 = tendency_vjp(&stage.x, &a1);

    let mut out = g.to_vec();
    axpy(&mut out, 1.0, &w1);
    axpy(&mut out, 1.0, &w2);
    axpy(&mut out, 1.0, &w3);
    axpy(&mut out, 1.0, &w4);
    out
}
