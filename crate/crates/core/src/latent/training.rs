//! Shared pieces of the gradient-descent training loops: schedule,
//! initialization and batching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Gradient-descent schedule: Adam with linear warm-up over the first
/// `warmup_fraction` of steps followed by cosine decay to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-4,
            warmup_fraction: 0.05,
            validation_fraction: 0.1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total` steps.
pub(crate) fn lr_at(step: usize, total: usize, base: f64, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let warmup = ((total as f64 * warmup_fraction).ceil() as usize).max(1);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        let progress = (step - warmup) as f64 / (total - warmup) as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    } else {
        base
    }
}

/// Xavier-uniform initialization.
pub(crate) fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data by construction")
}

/// Deterministic time-ordered train/validation split: the trailing fraction
/// of the archive is held out.
pub(crate) fn split_train_val<T: Clone>(data: &[T], validation_fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_val = (data.len() as f64 * validation_fraction).round() as usize;
    let n_train = data.len() - n_val;
    (data[..n_train].to_vec(), data[n_train..].to_vec())
}

/// In-place Fisher-Yates shuffle with the caller's rng.
pub(crate) fn shuffle_indices<R: Rng + ?Sized>(indices: &mut [usize], rng: &mut R) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}
