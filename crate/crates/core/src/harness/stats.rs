//! Small statistical helpers for the comparison experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Paired bootstrap over per-cycle differences: resample the differences
/// with replacement and report the fraction of resampled means that are
/// non-positive. A fraction below `1 - confidence` supports "mean > 0".
pub fn paired_bootstrap_prob_nonpositive(
    diffs: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<f64> {
    if diffs.len() < 10 {
        return Err(Error::InsufficientSamples(format!(
            "paired bootstrap needs at least 10 differences, got {}",
            diffs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = diffs.len();
    let mut nonpositive = 0usize;
    for _ in 0..n_resamples {
        let mut sum = 0.0;
        for _ in 0..n {
            sum += diffs[rng.gen_range(0..n)];
        }
        if sum / n as f64 <= 0.0 {
            nonpositive += 1;
        }
    }
    Ok(nonpositive as f64 / n_resamples as f64)
}

/// Mean and a symmetric normal-approximation confidence half-width across a
/// small number of seeds.
pub fn mean_and_halfwidth(values: &[f64], z: f64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, z * (var / n).sqrt()))
}
