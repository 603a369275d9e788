//! Error metrics: weighted RMSE against truth, RMSE against observations,
//! Pearson correlation, and the quality-control thresholds.

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::observations::{apply_h, ObservationSet};

/// Weight-normalized root mean square error. Uniform weights reduce to the
/// plain RMSE; the 1-D testbed uses uniform weights throughout.
pub fn weighted_rmse(x: &StateVector, truth: &StateVector, weights: &[f64]) -> Result<f64> {
    let n = x.len();
    if truth.len() != n || weights.len() != n {
        return Err(Error::Contract(format!(
            "weighted_rmse length mismatch: x {}, truth {}, weights {}",
            n,
            truth.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Contract("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract("weights must sum to a positive value".into()));
    }
    let mse = x
        .values()
        .iter()
        .zip(truth.values())
        .zip(weights)
        .map(|((a, b), w)| w * (a - b).powi(2))
        .sum::<f64>()
        / total;
    Ok(mse.sqrt())
}

/// Plain RMSE with uniform weights.
pub fn rmse(x: &StateVector, truth: &StateVector) -> Result<f64> {
    weighted_rmse(x, truth, &vec![1.0; x.len()])
}

/// RMSE of a state against the usable points of an observation set.
pub fn obs_rmse(x: &StateVector, obs: &ObservationSet) -> Result<f64> {
    let h = apply_h(x, &obs.network)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pos, &idx) in obs.network.observed_indices().iter().enumerate() {
        if obs.mask.values()[idx] > 0.0 {
            total += (h[pos] - obs.values[pos]).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no usable observations for RMSE".into()));
    }
    Ok((total / count as f64).sqrt())
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "pearson length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::UndefinedMetric(format!(
            "pearson needs at least 3 points, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for (x, y) in a.iter().zip(b) {
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
        sab += (x - ma) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("pearson is undefined for zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Quality-control thresholds: per-coordinate mean absolute difference
/// between reference states `lag` intervals apart.
pub fn build_qc_thresholds(reference_run: &[StateVector], lag: usize) -> Result<Vec<f64>> {
    if reference_run.len() < lag + 100 {
        return Err(Error::InsufficientSamples(format!(
            "need at least lag + 100 = {} states, got {}",
            lag + 100,
            reference_run.len()
        )));
    }
    let n = reference_run[0].len();
    let mut acc = vec![0.0; n];
    let count = reference_run.len() - lag;
    for t in lag..reference_run.len() {
        for i in 0..n {
            acc[i] += (reference_run[t].values()[i] - reference_run[t - lag].values()[i]).abs();
        }
    }
    Ok(acc.into_iter().map(|v| v / count as f64).collect())
}
