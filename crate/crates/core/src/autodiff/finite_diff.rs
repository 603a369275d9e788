//! Central finite-difference gradients, the independent oracle against which
//! every reverse-mode gradient in this crate is checked.

use crate::autodiff::{Objective, Tensor};
use crate::error::{Error, Result};

/// Central differences `(L(p + h e_i) - L(p - h e_i)) / (2h)` per coordinate.
pub fn finite_difference_gradient(
    objective: &dyn Objective,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].len() {
            let original = work[p].data()[i];
            work[p].data_mut()[i] = original + h;
            let plus = objective.value(&work)?;
            work[p].data_mut()[i] = original - h;
            let minus = objective.value(&work)?;
            work[p].data_mut()[i] = original;
            g.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}
