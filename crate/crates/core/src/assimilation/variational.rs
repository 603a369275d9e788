//! The four variational baselines. The model-space 3DVar cost is strictly
//! convex and solved with L-BFGS; the remaining costs involve the forecast
//! model or the decoder and are minimized with Adam followed by a bounded
//! L-BFGS refinement from the best visited point.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::assimilation::{AnalysisResult, MethodKind, SolverDiagnostics};
use crate::autodiff::{
    adam_step, lbfgs_minimize_with, AdamParams, AdamState, GraphBuilder, LbfgsOptions, NodeId,
    Objective, Program, Tensor, Termination,
};
use crate::covariance::{DiagonalCovariance, FullCovariance};
use crate::dynamics::{forecast_gradient, forecast_state, ModelConfig, StateVector};
use crate::error::{Error, Result};
use crate::latent::{emit_layers_const, AutoencoderModel, LatentVector};
use crate::observations::ObservationSet;

/// Optimizer settings shared by the variational solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalSettings {
    /// Adam learning rate for latent-space costs.
    pub adam_lr_latent: f64,
    /// Adam learning rate for the model-space window cost.
    pub adam_lr_model: f64,
    pub adam_max_iters: usize,
    /// Stop Adam when the best cost improves by less than this over
    /// `stall_window` iterations.
    pub stall_improvement: f64,
    pub stall_window: usize,
    /// Iteration cap for the L-BFGS refinement stage.
    pub polish_max_iters: usize,
    /// Gradient tolerance and iteration cap for the 3DVar L-BFGS solve.
    pub lbfgs_tol: f64,
    pub lbfgs_max_iters: usize,
}

impl Default for VariationalSettings {
    fn default() -> Self {
        VariationalSettings {
            adam_lr_latent: 0.05,
            adam_lr_model: 0.02,
            adam_max_iters: 500,
            stall_improvement: 1e-8,
            stall_window: 20,
            polish_max_iters: 120,
            lbfgs_tol: 1e-8,
            lbfgs_max_iters: 200,
        }
    }
}

/// Observation slot reduced to its usable points.
struct ActiveObs {
    indices: Vec<usize>,
    values: Vec<f64>,
    inv_std: Vec<f64>,
}

fn active_obs(obs: &ObservationSet) -> Result<ActiveObs> {
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut inv_std = Vec::new();
    for (pos, &idx) in obs.network.observed_indices().iter().enumerate() {
        if obs.mask.values()[idx] == 0.0 {
            continue;
        }
        let std = obs.network.noise_std()[pos];
        if !(std > 0.0) {
            return Err(Error::Contract(format!(
                "observation error std must be positive for assimilation, got {std} at index {idx}"
            )));
        }
        indices.push(idx);
        values.push(obs.values[pos]);
        inv_std.push(1.0 / std);
    }
    Ok(ActiveObs { indices, values, inv_std })
}

/// Whitening factor G with `G G^T = B^{-1}`, from the Cholesky of B.
fn whitening_factor(b: &FullCovariance) -> Result<(Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)> {
    let chol = Cholesky::new(b.matrix().clone())
        .ok_or_else(|| Error::Estimation("background covariance is not positive definite".into()))?;
    let n = b.dim();
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Estimation("failed to invert the Cholesky factor".into()))?;
    Ok((chol, l_inv.transpose()))
}

fn matrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (rows, cols) = m.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(m[(r, c)]);
        }
    }
    Tensor::new(rows, cols, data).expect("shape matches data")
}

/// Append the quadratic observation misfit of one slot to a tape: gather the
/// active indices of `state_node`, subtract the values, weight by `1/std`,
/// and halve the sum of squares.
fn emit_obs_term(
    g: &mut GraphBuilder,
    state_node: NodeId,
    obs: &ActiveObs,
) -> Result<Option<NodeId>> {
    if obs.indices.is_empty() {
        return Ok(None);
    }
    let picked = g.gather(state_node, obs.indices.clone())?;
    let y = g.constant(Tensor::row(obs.values.clone()));
    let resid = g.sub(picked, y)?;
    let w = g.constant(Tensor::row(obs.inv_std.clone()));
    let weighted = g.mul(resid, w)?;
    let ss = g.sum_squares(weighted)?;
    Ok(Some(g.scale(ss, 0.5)?))
}

/// Tape for the model-space 3DVar cost.
fn build_3dvar_program(
    x_b: &StateVector,
    b: &FullCovariance,
    obs: &ActiveObs,
) -> Result<Program> {
    let n = x_b.len();
    if b.dim() != n {
        return Err(Error::Contract(format!(
            "background covariance dimension {} does not match state {}",
            b.dim(),
            n
        )));
    }
    let (_, g_factor) = whitening_factor(b)?;
    let mut g = GraphBuilder::new();
    let x = g.input(1, n);
    let xb = g.constant(Tensor::row(x_b.values().to_vec()));
    let r = g.sub(x, xb)?;
    let gf = g.constant(matrix_to_tensor(&g_factor));
    let white = g.matmul(r, gf)?;
    let ss = g.sum_squares(white)?;
    let mut total = g.scale(ss, 0.5)?;
    if let Some(term) = emit_obs_term(&mut g, x, obs)? {
        total = g.add(total, term)?;
    }
    g.finish(total)
}

/// Emit the decoder (including the normalization inverse) with weights as
/// constants; returns the model-space node.
fn emit_decode(g: &mut GraphBuilder, ae: &AutoencoderModel, z: NodeId) -> Result<NodeId> {
    let normalized = emit_layers_const(g, &ae.decoder, z, 1)?;
    let scale = g.constant(Tensor::row(ae.normalization.scale.clone()));
    let mean = g.constant(Tensor::row(ae.normalization.mean.clone()));
    let scaled = g.mul(normalized, scale)?;
    g.add(scaled, mean)
}

/// Tape for the latent-space 3DVar cost.
fn build_l3dvar_program(
    ae: &AutoencoderModel,
    z_b: &LatentVector,
    bz: &DiagonalCovariance,
    obs: &ActiveObs,
) -> Result<Program> {
    let n_z = z_b.len();
    if bz.len() != n_z {
        return Err(Error::Contract("latent background covariance length mismatch".into()));
    }
    let inv_std_b: Vec<f64> = bz
        .variances()
        .iter()
        .map(|v| {
            if *v > 0.0 {
                Ok(1.0 / v.sqrt())
            } else {
                Err(Error::Contract("latent background variances must be positive".into()))
            }
        })
        .collect::<Result<_>>()?;

    let mut g = GraphBuilder::new();
    let z = g.input(1, n_z);
    let zb = g.constant(Tensor::row(z_b.values().to_vec()));
    let r = g.sub(z, zb)?;
    let w = g.constant(Tensor::row(inv_std_b));
    let white = g.mul(r, w)?;
    let ss = g.sum_squares(white)?;
    let mut total = g.scale(ss, 0.5)?;
    let x = emit_decode(&mut g, ae, z)?;
    if let Some(term) = emit_obs_term(&mut g, x, obs)? {
        total = g.add(total, term)?;
    }
    g.finish(total)
}

/// Model-space window cost: background term plus per-slot observation
/// misfits along the integrated trajectory. Gradients combine the tape-free
/// quadratic terms with reverse accumulation through the model.
struct WindowCost<'a> {
    model: &'a ModelConfig,
    x_b: Vec<f64>,
    b_inv: DMatrix<f64>,
    slots: Vec<ActiveObs>,
}

impl WindowCost<'_> {
    fn trajectory(&self, x0: &[f64]) -> Result<Vec<StateVector>> {
        let steps = self.model.steps_per_da_interval;
        let mut states = Vec::with_capacity(self.slots.len());
        states.push(StateVector::new(x0.to_vec())?);
        for _ in 1..self.slots.len() {
            let next = forecast_state(states.last().unwrap(), steps, self.model)?;
            states.push(next);
        }
        Ok(states)
    }

    fn slot_cost_and_grad(&self, slot: usize, state: &StateVector) -> (f64, Vec<f64>) {
        let obs = &self.slots[slot];
        let mut cost = 0.0;
        let mut grad = vec![0.0; state.len()];
        for ((idx, y), inv_std) in
            obs.indices.iter().zip(&obs.values).zip(&obs.inv_std)
        {
            let inv_var = inv_std * inv_std;
            let d = state.values()[*idx] - y;
            cost += 0.5 * inv_var * d * d;
            grad[*idx] += inv_var * d;
        }
        (cost, grad)
    }

    fn background_cost_and_grad(&self, x0: &[f64]) -> (f64, Vec<f64>) {
        let r = DVector::from_iterator(x0.len(), x0.iter().zip(&self.x_b).map(|(a, b)| a - b));
        let binv_r = &self.b_inv * &r;
        (0.5 * r.dot(&binv_r), binv_r.iter().copied().collect())
    }
}

impl Objective for WindowCost<'_> {
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        let x0 = params[0].data();
        let states = self.trajectory(x0)?;
        let mut total = self.background_cost_and_grad(x0).0;
        for (slot, state) in states.iter().enumerate() {
            total += self.slot_cost_and_grad(slot, state).0;
        }
        Ok(total)
    }

    fn value_and_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let x0 = params[0].data();
        let n = x0.len();
        let steps = self.model.steps_per_da_interval;
        let states = self.trajectory(x0)?;

        let (mut total, bg_grad) = self.background_cost_and_grad(x0);
        let mut slot_grads = Vec::with_capacity(states.len());
        for (slot, state) in states.iter().enumerate() {
            let (c, g) = self.slot_cost_and_grad(slot, state);
            total += c;
            slot_grads.push(g);
        }

        // Reverse sweep: pull each slot's gradient back to the window start.
        let last = states.len() - 1;
        let mut adj = StateVector::new(slot_grads[last].clone())?;
        for i in (1..=last).rev() {
            adj = forecast_gradient(&states[i - 1], steps, &adj, self.model)?;
            for (a, g) in adj.values_mut().iter_mut().zip(&slot_grads[i - 1]) {
                *a += g;
            }
        }
        let mut grad = vec![0.0; n];
        for i in 0..n {
            grad[i] = bg_grad[i] + adj.values()[i];
        }
        Ok((total, vec![Tensor::row(grad)]))
    }
}

/// Latent window cost: diagonal background term plus the model-space window
/// misfit of the decoded initial state; the model adjoint is pulled back
/// through the decoder with a tape.
struct LatentWindowCost<'a> {
    ae: &'a AutoencoderModel,
    model: &'a ModelConfig,
    z_b: Vec<f64>,
    inv_var_b: Vec<f64>,
    slots: Vec<ActiveObs>,
}

impl LatentWindowCost<'_> {
    fn decode(&self, z: &[f64]) -> Result<StateVector> {
        self.ae.decode(&LatentVector::new(z.to_vec())?)
    }

    fn background(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let mut cost = 0.0;
        let mut grad = vec![0.0; z.len()];
        for i in 0..z.len() {
            let d = z[i] - self.z_b[i];
            cost += 0.5 * self.inv_var_b[i] * d * d;
            grad[i] = self.inv_var_b[i] * d;
        }
        (cost, grad)
    }

    /// `(d x0 / d z)^T lambda` via a tape over the decoder.
    fn decoder_pullback(&self, z: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        let mut g = GraphBuilder::new();
        let zin = g.input(1, z.len());
        let x = emit_decode(&mut g, self.ae, zin)?;
        let lam = g.constant(Tensor::column(lambda.to_vec()));
        let dot = g.matmul(x, lam)?;
        let program = g.finish(dot)?;
        let grads = program.eval_with_grad(&[Tensor::row(z.to_vec())])?.1;
        Ok(grads[0].data().to_vec())
    }
}

impl Objective for LatentWindowCost<'_> {
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        let z = params[0].data();
        let x0 = self.decode(z)?;
        let steps = self.model.steps_per_da_interval;
        let mut total = self.background(z).0;
        let mut state = x0;
        for slot in 0..self.slots.len() {
            if slot > 0 {
                state = forecast_state(&state, steps, self.model)?;
            }
            let obs = &self.slots[slot];
            for ((idx, y), inv_std) in obs.indices.iter().zip(&obs.values).zip(&obs.inv_std)
            {
                let d = state.values()[*idx] - y;
                total += 0.5 * inv_std * inv_std * d * d;
            }
        }
        Ok(total)
    }

    fn value_and_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let z = params[0].data();
        let steps = self.model.steps_per_da_interval;
        let x0 = self.decode(z)?;

        let mut states = Vec::with_capacity(self.slots.len());
        states.push(x0);
        for _ in 1..self.slots.len() {
            states.push(forecast_state(states.last().unwrap(), steps, self.model)?);
        }

        let (mut total, bg_grad) = self.background(z);
        let mut slot_grads = Vec::with_capacity(states.len());
        for (slot, state) in states.iter().enumerate() {
            let obs = &self.slots[slot];
            let mut g = vec![0.0; state.len()];
            for ((idx, y), inv_std) in obs.indices.iter().zip(&obs.values).zip(&obs.inv_std)
            {
                let inv_var = inv_std * inv_std;
                let d = state.values()[*idx] - y;
                total += 0.5 * inv_var * d * d;
                g[*idx] += inv_var * d;
            }
            slot_grads.push(g);
        }

        let last = states.len() - 1;
        let mut adj = StateVector::new(slot_grads[last].clone())?;
        for i in (1..=last).rev() {
            adj = forecast_gradient(&states[i - 1], steps, &adj, self.model)?;
            for (a, g) in adj.values_mut().iter_mut().zip(&slot_grads[i - 1]) {
                *a += g;
            }
        }
        let pullback = self.decoder_pullback(z, adj.values())?;
        let grad: Vec<f64> = bg_grad.iter().zip(&pullback).map(|(a, b)| a + b).collect();
        Ok((total, vec![Tensor::row(grad)]))
    }
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt()
}

/// Adam with early stopping, then a bounded L-BFGS refinement from the best
/// visited point. The returned point never has a higher cost than the start.
fn minimize_two_phase(
    objective: &dyn Objective,
    initial: &[Tensor],
    learning_rate: f64,
    settings: &VariationalSettings,
) -> Result<(Vec<Tensor>, SolverDiagnostics)> {
    let (initial_cost, g0) = objective.value_and_grad(initial)?;
    let mut params: Vec<Tensor> = initial.to_vec();
    let mut best_params = params.clone();
    let mut best_cost = initial_cost;
    let mut last_grad_norm = grad_norm(&g0);
    let mut adam = AdamState::new(&params, AdamParams::with_learning_rate(learning_rate));
    let mut iterations = 0usize;
    let mut stalled = false;
    let mut window_best = best_cost;

    for it in 0..settings.adam_max_iters {
        let step = match objective.value_and_grad(&params) {
            Ok((cost, grads)) => {
                if cost < best_cost {
                    best_cost = cost;
                    best_params = params.clone();
                }
                last_grad_norm = grad_norm(&grads);
                adam_step(&mut params, &grads, &mut adam)
            }
            Err(Error::IntegrationBlowup { .. }) => {
                // The optimizer stepped off the attractor; fall back to the
                // best visited point and let the refinement stage continue.
                stalled = true;
                break;
            }
            Err(e) => return Err(e),
        };
        step?;
        iterations += 1;
        if (it + 1) % settings.stall_window == 0 {
            if window_best - best_cost < settings.stall_improvement {
                break;
            }
            window_best = best_cost;
        }
    }

    // Refinement from the best visited point.
    let tol = 1e-12 * (1.0 + last_grad_norm);
    let options = LbfgsOptions::default();
    match lbfgs_minimize_with(
        objective,
        &best_params,
        tol,
        settings.polish_max_iters,
        &options,
    ) {
        Ok(out) => {
            iterations += out.iterations;
            if out.final_loss <= best_cost {
                best_cost = out.final_loss;
                best_params = out.params;
            }
            last_grad_norm = out.grad_norm;
            let converged = matches!(
                out.termination,
                Termination::Converged | Termination::PrecisionLimit
            );
            Ok((
                best_params,
                SolverDiagnostics {
                    iterations,
                    initial_cost,
                    final_cost: best_cost,
                    final_grad_norm: last_grad_norm,
                    converged,
                    stalled,
                },
            ))
        }
        Err(Error::OptimizationStalled(_)) => Ok((
            best_params,
            SolverDiagnostics {
                iterations,
                initial_cost,
                final_cost: best_cost,
                final_grad_norm: last_grad_norm,
                converged: false,
                stalled: true,
            },
        )),
        Err(e) => Err(e),
    }
}

/// Model-space 3DVar: strictly convex quadratic, solved with L-BFGS.
pub fn solve_3dvar(
    x_b: &StateVector,
    obs: &ObservationSet,
    b: &FullCovariance,
    settings: &VariationalSettings,
) -> Result<AnalysisResult> {
    let active = active_obs(obs)?;
    let program = build_3dvar_program(x_b, b, &active)?;
    let initial = vec![Tensor::row(x_b.values().to_vec())];
    let initial_cost = program.eval(&initial)?;
    match lbfgs_minimize_with(
        &program,
        &initial,
        settings.lbfgs_tol,
        settings.lbfgs_max_iters,
        &LbfgsOptions::default(),
    ) {
        Ok(out) => Ok(AnalysisResult {
            method: MethodKind::H3dvar,
            x_a: StateVector::new(out.params[0].data().to_vec())?,
            z_a: None,
            latent_variance: None,
            model_variance: None,
            window_states: None,
            diagnostics: SolverDiagnostics {
                iterations: out.iterations,
                initial_cost,
                final_cost: out.final_loss,
                final_grad_norm: out.grad_norm,
                converged: matches!(
                    out.termination,
                    Termination::Converged | Termination::PrecisionLimit
                ),
                stalled: false,
            },
        }),
        Err(Error::OptimizationStalled(msg)) => Ok(AnalysisResult {
            method: MethodKind::H3dvar,
            x_a: x_b.clone(),
            z_a: None,
            latent_variance: None,
            model_variance: None,
            window_states: None,
            diagnostics: SolverDiagnostics {
                iterations: 0,
                initial_cost,
                final_cost: initial_cost,
                final_grad_norm: f64::NAN,
                converged: false,
                stalled: true,
            },
        })
        .map(|r| {
            let _ = msg;
            r
        }),
        Err(e) => Err(e),
    }
}

/// Model-space window cost over `window_obs` slots (slot 0 at the initial
/// time), minimized over the initial state.
pub fn solve_4dvar(
    x_b: &StateVector,
    window_obs: &[ObservationSet],
    model: &ModelConfig,
    b: &FullCovariance,
    settings: &VariationalSettings,
) -> Result<AnalysisResult> {
    if window_obs.is_empty() {
        return Err(Error::Contract("window must contain at least one observation slot".into()));
    }
    let (chol, _) = whitening_factor(b)?;
    let b_inv = chol.inverse();
    let slots: Vec<ActiveObs> = window_obs.iter().map(active_obs).collect::<Result<_>>()?;
    let cost = WindowCost { model, x_b: x_b.values().to_vec(), b_inv, slots };
    let initial = vec![Tensor::row(x_b.values().to_vec())];
    let (best, diagnostics) =
        minimize_two_phase(&cost, &initial, settings.adam_lr_model, settings)?;

    let x_a = StateVector::new(best[0].data().to_vec())?;
    let states = cost.trajectory(x_a.values())?;
    Ok(AnalysisResult {
        method: MethodKind::H4dvar,
        x_a,
        z_a: None,
        latent_variance: None,
        model_variance: None,
        window_states: Some(states),
        diagnostics,
    })
}

/// Latent-space 3DVar: diagonal latent background term plus the model-space
/// misfit of the decoded state.
pub fn solve_l3dvar(
    ae: &AutoencoderModel,
    z_b: &LatentVector,
    obs: &ObservationSet,
    bz: &DiagonalCovariance,
    settings: &VariationalSettings,
) -> Result<AnalysisResult> {
    let active = active_obs(obs)?;
    let program = build_l3dvar_program(ae, z_b, bz, &active)?;
    let initial = vec![Tensor::row(z_b.values().to_vec())];
    let (best, diagnostics) =
        minimize_two_phase(&program, &initial, settings.adam_lr_latent, settings)?;
    let z_a = LatentVector::new(best[0].data().to_vec())?;
    let x_a = ae.decode(&z_a)?;
    Ok(AnalysisResult {
        method: MethodKind::Hl3dvar,
        x_a,
        z_a: Some(z_a),
        latent_variance: None,
        model_variance: None,
        window_states: None,
        diagnostics,
    })
}

/// Latent-space window cost minimized over the latent initial state.
pub fn solve_l4dvar(
    ae: &AutoencoderModel,
    z_b: &LatentVector,
    window_obs: &[ObservationSet],
    model: &ModelConfig,
    bz: &DiagonalCovariance,
    settings: &VariationalSettings,
) -> Result<AnalysisResult> {
    if window_obs.is_empty() {
        return Err(Error::Contract("window must contain at least one observation slot".into()));
    }
    if bz.len() != z_b.len() {
        return Err(Error::Contract("latent background covariance length mismatch".into()));
    }
    let inv_var_b: Vec<f64> = bz
        .variances()
        .iter()
        .map(|v| {
            if *v > 0.0 {
                Ok(1.0 / v)
            } else {
                Err(Error::Contract("latent background variances must be positive".into()))
            }
        })
        .collect::<Result<_>>()?;
    let slots: Vec<ActiveObs> = window_obs.iter().map(active_obs).collect::<Result<_>>()?;
    let cost = LatentWindowCost { ae, model, z_b: z_b.values().to_vec(), inv_var_b, slots };
    let initial = vec![Tensor::row(z_b.values().to_vec())];
    let (best, diagnostics) =
        minimize_two_phase(&cost, &initial, settings.adam_lr_latent, settings)?;

    let z_a = LatentVector::new(best[0].data().to_vec())?;
    let x0 = ae.decode(&z_a)?;
    let steps = model.steps_per_da_interval;
    let mut states = vec![x0];
    for _ in 1..window_obs.len() {
        states.push(forecast_state(states.last().unwrap(), steps, model)?);
    }
    Ok(AnalysisResult {
        method: MethodKind::Hl4dvar,
        x_a: states[0].clone(),
        z_a: Some(z_a),
        latent_variance: None,
        model_variance: None,
        window_states: Some(states),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;
    use crate::latent::{fit_linear_ae, QualityMask};
    use crate::observations::{synthesize_observations, ObservationNetwork};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> FullCovariance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
        FullCovariance::new(&m * m.transpose() + DMatrix::identity(n, n) * 0.5).unwrap()
    }

    fn obs_set(n_x: usize, indices: Vec<usize>, values: Vec<f64>, std: f64) -> ObservationSet {
        let noise = vec![std; indices.len()];
        let mut mask = vec![0.0; n_x];
        for &i in &indices {
            mask[i] = 1.0;
        }
        ObservationSet::new(
            ObservationNetwork::new(indices, noise).unwrap(),
            values,
            QualityMask::new(mask).unwrap(),
            0,
        )
        .unwrap()
    }

    fn random_states(n: usize, count: usize, seed: u64) -> Vec<StateVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                StateVector::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn no_observations_returns_background() {
        let x_b = StateVector::new((0..6).map(|i| i as f64 * 0.2).collect()).unwrap();
        let b = random_spd(6, 1);
        let obs = obs_set(6, vec![], vec![], 0.1);
        let out = solve_3dvar(&x_b, &obs, &b, &VariationalSettings::default()).unwrap();
        for (a, bb) in out.x_a.values().iter().zip(x_b.values()) {
            assert!((a - bb).abs() < 1e-9);
        }
    }

    #[test]
    fn scalar_fully_observed_equal_weights_averages() {
        // n = 4 uniform problem observed at one point with B = R = I entry.
        let x_b = StateVector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = FullCovariance::new(DMatrix::identity(4, 4)).unwrap();
        let obs = obs_set(4, vec![0], vec![3.0], 1.0);
        let out = solve_3dvar(&x_b, &obs, &b, &VariationalSettings::default()).unwrap();
        assert!((out.x_a.values()[0] - 2.0).abs() < 1e-7, "{}", out.x_a.values()[0]);
    }

    #[test]
    fn matches_dense_blue_on_random_problem() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_b =
            StateVector::new((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let b = random_spd(n, 3);
        let indices: Vec<usize> = (0..n).step_by(3).collect();
        let values: Vec<f64> = indices.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sigma = 0.4;
        let obs = obs_set(n, indices.clone(), values.clone(), sigma);
        let out = solve_3dvar(&x_b, &obs, &b, &VariationalSettings::default()).unwrap();

        // Closed-form BLUE: x_b + B H^T (H B H^T + R)^{-1} (y - H x_b).
        let m = indices.len();
        let mut h = DMatrix::<f64>::zeros(m, n);
        for (k, &i) in indices.iter().enumerate() {
            h[(k, i)] = 1.0;
        }
        let bm = b.matrix();
        let hbht = &h * bm * h.transpose();
        let r = DMatrix::<f64>::identity(m, m) * sigma * sigma;
        let innov = DVector::from_vec(values)
            - &h * DVector::from_column_slice(x_b.values());
        let gain = bm * h.transpose() * (hbht + r).lu().try_inverse().unwrap();
        let want = DVector::from_column_slice(x_b.values()) + gain * innov;

        let scale = want.norm();
        for i in 0..n {
            let rel = (out.x_a.values()[i] - want[i]).abs() / scale.max(1e-12);
            assert!(rel < 1e-6, "coordinate {i}: rel {rel}");
        }
        assert!(out.diagnostics.final_cost <= out.diagnostics.initial_cost);
    }

    #[test]
    fn window_of_one_slot_equals_3dvar_cost() {
        let model = ModelConfig { n_x: 8, forcing: 8.0, dt: 0.05, steps_per_da_interval: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_b = StateVector::new((0..8).map(|_| rng.gen_range(1.0..3.0)).collect()).unwrap();
        let b = random_spd(8, 5);
        let obs = obs_set(8, vec![0, 3, 6], vec![2.0, 1.5, 2.5], 0.3);

        let active = active_obs(&obs).unwrap();
        let program = build_3dvar_program(&x_b, &b, &active).unwrap();
        let (chol, _) = whitening_factor(&b).unwrap();
        let cost = WindowCost {
            model: &model,
            x_b: x_b.values().to_vec(),
            b_inv: chol.inverse(),
            slots: vec![active_obs(&obs).unwrap()],
        };

        for _ in 0..10 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..4.0)).collect();
            let p = vec![Tensor::row(x)];
            let a = program.eval(&p).unwrap();
            let c = cost.value(&p).unwrap();
            assert!((a - c).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {c}");
        }
    }

    #[test]
    fn window_cost_gradient_matches_finite_differences() {
        let model = ModelConfig { n_x: 8, forcing: 8.0, dt: 0.05, steps_per_da_interval: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_b = StateVector::new((0..8).map(|_| rng.gen_range(1.0..3.0)).collect()).unwrap();
        let b = random_spd(8, 7);
        let (chol, _) = whitening_factor(&b).unwrap();
        let slots: Vec<ActiveObs> = (0..4)
            .map(|_| {
                let obs = obs_set(
                    8,
                    vec![1, 4, 7],
                    (0..3).map(|_| rng.gen_range(0.0..4.0)).collect(),
                    0.3,
                );
                active_obs(&obs).unwrap()
            })
            .collect();
        let cost =
            WindowCost { model: &model, x_b: x_b.values().to_vec(), b_inv: chol.inverse(), slots };

        for _ in 0..5 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(1.0..3.0)).collect();
            let p = vec![Tensor::row(x)];
            let (_, grads) = cost.value_and_grad(&p).unwrap();
            let fd = finite_difference_gradient(&cost, &p, 1e-6).unwrap();
            for (a, f) in grads[0].data().iter().zip(fd[0].data()) {
                let rel = (a - f).abs() / f.abs().max(1e-6);
                assert!(rel <= 1e-4, "{a} vs {f} (rel {rel})");
            }
        }
    }

    #[test]
    fn latent_window_gradient_matches_finite_differences() {
        let model = ModelConfig { n_x: 8, forcing: 8.0, dt: 0.05, steps_per_da_interval: 2 };
        let data = random_states(8, 200, 8);
        let ae = fit_linear_ae(&data, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let slots: Vec<ActiveObs> = (0..3)
            .map(|_| {
                let obs = obs_set(
                    8,
                    vec![0, 2, 5],
                    (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    0.3,
                );
                active_obs(&obs).unwrap()
            })
            .collect();
        let cost = LatentWindowCost {
            ae: &ae,
            model: &model,
            z_b: vec![0.1, -0.2, 0.3],
            inv_var_b: vec![2.0, 1.0, 4.0],
            slots,
        };
        for _ in 0..5 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = vec![Tensor::row(z)];
            let (_, grads) = cost.value_and_grad(&p).unwrap();
            let fd = finite_difference_gradient(&cost, &p, 1e-6).unwrap();
            for (a, f) in grads[0].data().iter().zip(fd[0].data()) {
                let rel = (a - f).abs() / f.abs().max(1e-6);
                assert!(rel <= 1e-4, "{a} vs {f} (rel {rel})");
            }
        }
    }

    #[test]
    fn l3dvar_without_observations_returns_latent_background() {
        let data = random_states(8, 200, 10);
        let ae = fit_linear_ae(&data, 3).unwrap();
        let z_b = LatentVector::new(vec![0.4, -0.1, 0.2]).unwrap();
        let bz = DiagonalCovariance::new(vec![1.0, 2.0, 0.5]).unwrap();
        let obs = obs_set(8, vec![], vec![], 0.1);
        let out =
            solve_l3dvar(&ae, &z_b, &obs, &bz, &VariationalSettings::default()).unwrap();
        for (a, b) in out.z_a.unwrap().values().iter().zip(z_b.values()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn l3dvar_linear_case_matches_dense_solve() {
        // Linear decoder and linear H make the latent cost quadratic; the
        // minimizer solves (Bz^{-1} + A^T R^{-1} A) dz = A^T R^{-1} (y - H D(z_b)).
        let data = random_states(8, 300, 11);
        let ae = fit_linear_ae(&data, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z_b = LatentVector::new(vec![0.3, -0.5, 0.8]).unwrap();
        let bz = DiagonalCovariance::new(vec![0.5, 0.3, 0.8]).unwrap();
        let indices = vec![0usize, 2, 4, 6];
        let y: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sigma = 0.3;
        let obs = obs_set(8, indices.clone(), y.clone(), sigma);

        let out = solve_l3dvar(&ae, &z_b, &obs, &bz, &VariationalSettings::default()).unwrap();

        // Dense oracle in latent space.
        let p = &ae.decoder[0].weight; // 3 x 8
        let mut a = DMatrix::<f64>::zeros(4, 3);
        for (row, &idx) in indices.iter().enumerate() {
            for k in 0..3 {
                a[(row, k)] = p.get(k, idx) * ae.normalization.scale[idx];
            }
        }
        let hdzb: Vec<f64> = {
            let x = ae.decode(&z_b).unwrap();
            indices.iter().map(|&i| x.values()[i]).collect()
        };
        let inv_r = 1.0 / (sigma * sigma);
        let binv = DMatrix::from_diagonal(&DVector::from_vec(
            bz.variances().iter().map(|v| 1.0 / v).collect::<Vec<_>>(),
        ));
        let lhs = binv + a.transpose() * inv_r * &a;
        let innovation =
            DVector::from_vec(y.iter().zip(&hdzb).map(|(yy, h)| yy - h).collect::<Vec<_>>());
        let rhs = a.transpose() * inv_r * innovation;
        let dz = lhs.lu().solve(&rhs).unwrap();

        let z = out.z_a.unwrap();
        for k in 0..3 {
            let want = z_b.values()[k] + dz[k];
            assert!(
                (z.values()[k] - want).abs() < 1e-6,
                "dim {k}: {} vs {want}",
                z.values()[k]
            );
        }
    }

    #[test]
    fn l4dvar_single_slot_cost_matches_l3dvar_cost() {
        let model = ModelConfig { n_x: 8, forcing: 8.0, dt: 0.05, steps_per_da_interval: 2 };
        let data = random_states(8, 200, 13);
        let ae = fit_linear_ae(&data, 3).unwrap();
        let z_b = LatentVector::new(vec![0.2, 0.1, -0.3]).unwrap();
        let bz = DiagonalCovariance::new(vec![0.5, 0.4, 0.6]).unwrap();
        let obs = obs_set(8, vec![1, 5], vec![0.5, -0.5], 0.25);

        let active = active_obs(&obs).unwrap();
        let l3 = build_l3dvar_program(&ae, &z_b, &bz, &active).unwrap();
        let l4 = LatentWindowCost {
            ae: &ae,
            model: &model,
            z_b: z_b.values().to_vec(),
            inv_var_b: bz.variances().iter().map(|v| 1.0 / v).collect(),
            slots: vec![active_obs(&obs).unwrap()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = vec![Tensor::row(z)];
            let a = l3.eval(&p).unwrap();
            let b = l4.value(&p).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn solvers_never_increase_the_cost() {
        let model = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        // Spin a state onto the attractor.
        let mut x = StateVector::uniform(40, 8.0);
        x.values_mut()[0] += 0.01;
        let x = crate::dynamics::forecast_state(&x, 400, &model).unwrap();
        let x_b = StateVector::new(
            x.values().iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let b = random_spd(40, 16);
        let indices: Vec<usize> = (0..40).step_by(3).collect();
        let net = ObservationNetwork::new(indices, vec![0.4; 14]).unwrap();
        let window: Vec<ObservationSet> = (0..2)
            .map(|t| synthesize_observations(&x, &net, t, &mut rng).unwrap())
            .collect();

        let out =
            solve_4dvar(&x_b, &window, &model, &b, &VariationalSettings::default()).unwrap();
        assert!(out.diagnostics.final_cost <= out.diagnostics.initial_cost);
        assert_eq!(out.window_states.as_ref().unwrap().len(), 2);
    }
}
