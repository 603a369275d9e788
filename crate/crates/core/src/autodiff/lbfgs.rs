//! Limited-memory BFGS with Armijo backtracking, used for the strictly
//! convex model-space cost and as the refinement stage of the other solvers.

use std::collections::VecDeque;

use crate::autodiff::{Objective, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// Number of (s, y) pairs retained.
    pub memory: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Step halvings before the line search gives up.
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions { memory: 10, armijo_c: 1e-4, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient norm reached the tolerance.
    Converged,
    /// Iteration cap reached first.
    MaxIterations,
    /// No representable step decreases the loss any further.
    PrecisionLimit,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub params: Vec<Tensor>,
    pub final_loss: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub termination: Termination,
}

impl LbfgsOutcome {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn flatten(params: &[Tensor]) -> Vec<f64> {
    params.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(template: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(template.len());
    let mut offset = 0;
    for t in template {
        let n = t.len();
        let mut copy = t.clone();
        copy.data_mut().copy_from_slice(&flat[offset..offset + n]);
        out.push(copy);
        offset += n;
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-loop recursion: the approximate inverse Hessian applied to `grad`,
/// with the usual `s^T y / y^T y` initial scaling from the newest pair.
/// History pairs are ordered oldest first.
fn two_loop_direction(history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, grad: &[f64]) -> Vec<f64> {
    let mut q = grad.to_vec();
    // Newest to oldest.
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    let gamma = match history.back() {
        Some((s, y, _)) => {
            let yy = dot(y, y);
            if yy > 0.0 {
                dot(s, y) / yy
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    // Oldest to newest, consuming the alphas in matching order.
    for ((s, y, rho), alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    q
}

type SearchPoint = (Vec<f64>, f64, Vec<f64>, f64);

/// Armijo backtracking with one quadratic-interpolation refinement. The
/// interpolated step is the exact line minimizer when the objective is
/// quadratic along the direction, which lets the two-loop recursion recover
/// quadratic problems in about one iteration per dimension.
fn line_search(
    objective: &dyn Objective,
    template: &[Tensor],
    x: &[f64],
    direction: &[f64],
    phi0: f64,
    dphi0: f64,
    options: &LbfgsOptions,
) -> Result<Option<SearchPoint>> {
    let point_at = |alpha: f64| -> Vec<f64> {
        x.iter().zip(direction).map(|(xi, di)| xi + alpha * di).collect()
    };
    // Exact minimizer of the parabola through (0, phi0) with slope dphi0
    // and the point (alpha, phi_alpha).
    let interpolate = |alpha: f64, phi_alpha: f64| -> Option<f64> {
        let denom = phi_alpha - phi0 - dphi0 * alpha;
        if denom > 0.0 && denom.is_finite() {
            let a = -0.5 * dphi0 * alpha * alpha / denom;
            if a.is_finite() && a > 0.0 {
                return Some(a);
            }
        }
        None
    };

    let mut alpha = 1.0;
    for _ in 0..=options.max_backtracks {
        let candidate = point_at(alpha);
        let (f1, g1) = objective.value_and_grad(&unflatten(template, &candidate))?;
        if f1.is_finite() && f1 <= phi0 + options.armijo_c * alpha * dphi0 {
            // Try the interpolated line minimizer once; keep whichever
            // admissible point is lower.
            if let Some(a_star) = interpolate(alpha, f1) {
                if (a_star - alpha).abs() > 1e-12 * alpha {
                    let refined = point_at(a_star);
                    let (f2, g2) = objective.value_and_grad(&unflatten(template, &refined))?;
                    if f2.is_finite()
                        && f2 < f1
                        && f2 <= phi0 + options.armijo_c * a_star * dphi0
                    {
                        return Ok(Some((refined, f2, flatten(&g2), a_star)));
                    }
                }
            }
            return Ok(Some((candidate, f1, flatten(&g1), alpha)));
        }
        alpha = match interpolate(alpha, f1) {
            Some(a) => a.clamp(0.1 * alpha, 0.5 * alpha),
            None => 0.5 * alpha,
        };
    }
    Ok(None)
}

/// Minimize with default options.
pub fn lbfgs_minimize(
    objective: &dyn Objective,
    initial: &[Tensor],
    tolerance: f64,
    max_iters: usize,
) -> Result<LbfgsOutcome> {
    lbfgs_minimize_with(objective, initial, tolerance, max_iters, &LbfgsOptions::default())
}

pub fn lbfgs_minimize_with(
    objective: &dyn Objective,
    initial: &[Tensor],
    tolerance: f64,
    max_iters: usize,
    options: &LbfgsOptions,
) -> Result<LbfgsOutcome> {
    if !(tolerance > 0.0) {
        return Err(Error::Contract(format!("tolerance must be positive, got {tolerance}")));
    }

    let mut x = flatten(initial);
    let (mut loss, g0) = objective.value_and_grad(&unflatten(initial, &x))?;
    let mut grad = flatten(&g0);
    let mut grad_norm = norm(&grad);

    // (s, y, rho) pairs, newest last.
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0usize;
    let mut termination = Termination::MaxIterations;

    if grad_norm <= tolerance {
        return Ok(LbfgsOutcome {
            params: unflatten(initial, &x),
            final_loss: loss,
            iterations: 0,
            grad_norm,
            termination: Termination::Converged,
        });
    }

    while iterations < max_iters {
        let direction: Vec<f64> =
            two_loop_direction(&history, &grad).iter().map(|v| -v).collect();

        let mut descent = dot(&grad, &direction);
        let step_direction = if descent < 0.0 {
            direction
        } else {
            // Fall back to steepest descent when curvature information
            // produced an ascent direction.
            descent = -grad_norm * grad_norm;
            grad.iter().map(|v| -v).collect()
        };

        let search = line_search(
            objective,
            initial,
            &x,
            &step_direction,
            loss,
            descent,
            options,
        )?;
        let (new_x, new_loss, new_grad, last_step) = match search {
            Some(t) => t,
            None => {
                // At numerical convergence the Armijo test cannot be
                // satisfied because no representable decrease exists.
                let scale = loss.abs().max(1.0);
                let min_step = 0.5f64.powi(options.max_backtracks as i32);
                if (descent.abs() * min_step) <= f64::EPSILON * scale * 1e3
                    || grad_norm <= tolerance.sqrt()
                {
                    termination = Termination::PrecisionLimit;
                    break;
                }
                return Err(Error::OptimizationStalled(format!(
                    "line search failed after {} backtracks at iteration {} (loss {:.6e}, grad norm {:.3e})",
                    options.max_backtracks, iterations, loss, grad_norm
                )));
            }
        };
        if std::env::var("LBFGS_TRACE").is_ok() {
            let dn = norm(&step_direction);
            eprintln!("it={iterations:3} f={loss:+.6e} |g|={grad_norm:.3e} |d|={dn:.3e} alpha={last_step:.3e}");
        }

        let s: Vec<f64> = new_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        x = new_x;
        loss = new_loss;
        grad = new_grad;
        grad_norm = norm(&grad);
        iterations += 1;

        if grad.iter().any(|v| !v.is_finite()) || !loss.is_finite() {
            return Err(Error::OptimizationStalled(format!(
                "non-finite loss or gradient at iteration {iterations}"
            )));
        }
        if grad_norm <= tolerance {
            termination = Termination::Converged;
            break;
        }
    }

    let params = unflatten(initial, &x);
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::OptimizationStalled("non-finite parameters after L-BFGS".into()));
    }
    Ok(LbfgsOutcome { params, final_loss: loss, iterations, grad_norm, termination })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ClosureObjective;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quadratic_objective(
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> impl Objective {
        ClosureObjective::new(move |params: &[Tensor]| {
            let x = DVector::from_column_slice(params[0].data());
            let ax = &a * &x;
            let value = 0.5 * x.dot(&ax) - b.dot(&x);
            let grad = &ax - &b;
            Ok((value, vec![Tensor::row(grad.iter().copied().collect())]))
        })
    }

    #[test]
    fn two_loop_matches_dense_bfgs_update() {
        // Build the dense inverse-Hessian approximation
        // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T, oldest pair
        // first with H0 = gamma I, and compare H * g with the recursion.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 5;
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        for _ in 0..4 {
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // y with guaranteed positive s^T y.
            let mut y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sy = dot(&s, &y);
            if sy <= 0.1 {
                for (yi, si) in y.iter_mut().zip(&s) {
                    *yi += (0.2 - sy) * si / dot(&s, &s);
                }
            }
            let rho = 1.0 / dot(&s, &y);
            history.push_back((s, y, rho));
        }

        let (s_new, y_new, _) = history.back().unwrap();
        let gamma = dot(s_new, y_new) / dot(y_new, y_new);
        let mut h = DMatrix::<f64>::identity(n, n) * gamma;
        for (s, y, rho) in history.iter() {
            let sv = DVector::from_column_slice(s);
            let yv = DVector::from_column_slice(y);
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &sv * yv.transpose() * *rho;
            let right = &i - &yv * sv.transpose() * *rho;
            h = &left * h * &right + &sv * sv.transpose() * *rho;
        }

        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = &h * DVector::from_column_slice(&g);
        let got = two_loop_direction(&history, &g);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn solves_strictly_convex_quadratic() {
        // Dimension within the default history length, so the recursion can
        // represent the full curvature.
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let want = a.clone().lu().solve(&b).unwrap();

        let obj = quadratic_objective(a, b);
        let out =
            lbfgs_minimize(&obj, &[Tensor::zeros(1, n)], 1e-8, n + 5).unwrap();
        assert!(out.converged(), "termination {:?}", out.termination);
        assert!(out.iterations <= n + 5);
        for (got, w) in out.params[0].data().iter().zip(want.iter()) {
            assert!((got - w).abs() < 1e-6, "{got} vs {w}");
        }
    }

    #[test]
    fn already_optimal_takes_zero_iterations() {
        let a = DMatrix::identity(3, 3);
        let b = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let obj = quadratic_objective(a, b);
        let out = lbfgs_minimize(
            &obj,
            &[Tensor::row(vec![1.0, 2.0, 3.0])],
            1e-8,
            50,
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.converged());
    }

    #[test]
    fn rosenbrock_reaches_the_minimum() {
        let obj = ClosureObjective::new(|params: &[Tensor]| {
            let x = params[0].data()[0];
            let y = params[0].data()[1];
            let value = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
            let gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x);
            let gy = 200.0 * (y - x * x);
            Ok((value, vec![Tensor::row(vec![gx, gy])]))
        });
        let out = lbfgs_minimize(&obj, &[Tensor::row(vec![-1.2, 1.0])], 1e-9, 500).unwrap();
        assert!(out.converged());
        assert!((out.params[0].data()[0] - 1.0).abs() < 1e-6);
        assert!((out.params[0].data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_minimizers_match_direct_solve_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..8usize);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let a = &m * m.transpose() + DMatrix::identity(n, n) * rng.gen_range(0.3..1.5);
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let want = a.clone().lu().solve(&b).unwrap();
            let obj = quadratic_objective(a, b);
            let out = lbfgs_minimize(&obj, &[Tensor::zeros(1, n)], 1e-10, 200).unwrap();
            assert!(out.grad_norm <= 1e-10);
            for (got, w) in out.params[0].data().iter().zip(want.iter()) {
                assert!((got - w).abs() < 1e-6);
            }
        }
    }
}
