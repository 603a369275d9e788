//! Minimal reverse-mode differentiation over dense 2-D tensors, plus the
//! optimizers used by the variational solvers and network training.
//!
//! The primitive set is deliberately small: dense matmul, elementwise
//! add/multiply/tanh, column gather, sum-of-squares and scalar scale. That is
//! enough to express every network and cost function in this crate while
//! keeping the gradient pass auditable.

mod adam;
mod finite_diff;
mod graph;
mod lbfgs;
mod tensor;

pub use adam::{adam_step, AdamParams, AdamState};
pub use finite_diff::finite_difference_gradient;
pub use graph::{grad, GraphBuilder, NodeId, Program};
pub use lbfgs::{lbfgs_minimize, lbfgs_minimize_with, LbfgsOptions, LbfgsOutcome, Termination};
pub use tensor::Tensor;

use crate::error::Result;

/// A differentiable scalar objective of a list of tensor parameters.
///
/// Tape programs implement this directly; costs that need the hand-written
/// model adjoint implement it with custom `value_and_grad` logic.
pub trait Objective {
    fn value(&self, params: &[Tensor]) -> Result<f64>;

    fn value_and_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;
}

/// Objective defined by a closure returning value and gradient together.
pub struct ClosureObjective<F>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    f: F,
}

impl<F> ClosureObjective<F>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    pub fn new(f: F) -> Self {
        ClosureObjective { f }
    }
}

impl<F> Objective for ClosureObjective<F>
where
    F: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        Ok((self.f)(params)?.0)
    }

    fn value_and_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        (self.f)(params)
    }
}
