//! Linear autoencoder: principal directions of the normalized climatology.
//!
//! The encoder projects onto the top `n_z` eigenvectors of the sample
//! covariance; the decoder is the transpose reconstruction. Restricted to the
//! latent subspace the pair is exactly the identity, and the decoder is
//! exactly affine, which the assimilation update's uncertainty propagation
//! relies on.

use nalgebra::DMatrix;

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::latent::{
    Activation, AeVariant, AutoencoderModel, DenseLayer, Normalization,
};
use crate::Tensor;

pub fn fit_linear_ae(training_states: &[StateVector], n_z: usize) -> Result<AutoencoderModel> {
    if training_states.is_empty() {
        return Err(Error::InsufficientSamples("no training states".into()));
    }
    let n_x = training_states[0].len();
    if training_states.len() < n_x {
        return Err(Error::InsufficientSamples(format!(
            "need at least {} states for a {}-dimensional fit, got {}",
            n_x,
            n_x,
            training_states.len()
        )));
    }
    if n_z == 0 || n_z > n_x {
        return Err(Error::Config(format!("n_z must be in [1, {n_x}], got {n_z}")));
    }

    let normalization = Normalization::fit(training_states)?;
    let count = training_states.len();

    // Covariance of the normalized states. The normalized sample mean is
    // zero by construction, so the uncentered product suffices.
    let mut cov = DMatrix::<f64>::zeros(n_x, n_x);
    for s in training_states {
        let y = normalization.normalize(s.values());
        for i in 0..n_x {
            for j in i..n_x {
                cov[(i, j)] += y[i] * y[j];
            }
        }
    }
    let denom = (count - 1) as f64;
    for i in 0..n_x {
        for j in i..n_x {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..n_x).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .partial_cmp(&eigen.eigenvalues[a])
            .expect("eigenvalues are finite")
    });

    let top = eigen.eigenvalues[order[0]].max(f64::EPSILON);
    if eigen.eigenvalues[order[n_z - 1]] <= 1e-12 * top {
        return Err(Error::DegenerateData(format!(
            "training data has rank below the requested {n_z} latent dimensions"
        )));
    }

    // Projection matrix, columns = principal directions with a fixed sign
    // convention (largest-magnitude entry positive).
    let mut proj = vec![0.0; n_x * n_z];
    for (col, &k) in order.iter().take(n_z).enumerate() {
        let v = eigen.eigenvectors.column(k);
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for row in 0..n_x {
            proj[row * n_z + col] = sign * v[row];
        }
    }
    let p = Tensor::new(n_x, n_z, proj)?;
    let pt = p.transpose();

    let encoder = vec![DenseLayer::new(p, Tensor::zeros(1, n_z), Activation::Identity)?];
    let decoder = vec![DenseLayer::new(pt, Tensor::zeros(1, n_x), Activation::Identity)?];

    Ok(AutoencoderModel {
        variant: AeVariant::Linear,
        encoder,
        decoder,
        n_x,
        n_z,
        normalization,
    })
}
