//! Encoder/decoder and observation-to-latent networks with their training
//! procedures.
//!
//! Two autoencoder variants share one model type: a `linear` variant whose
//! encoder holds the top principal directions of the training climatology
//! (its decoder is exactly affine), and an `mlp` variant trained by gradient
//! descent on the reconstruction loss. The observation-to-latent network maps
//! a dense observation image plus its quality mask straight into the frozen
//! autoencoder's latent space.

mod checkpoint;
mod linear;
mod mlp;
mod o2l;
mod training;

pub use checkpoint::{ae_identity, load_ae, load_o2l, save_ae, save_o2l};
pub use linear::fit_linear_ae;
pub use mlp::{train_mlp_ae, AeTrainingOutcome, AeTrainingReport};
pub use o2l::{
    build_o2l_input, o2l_forward, observation_only_analysis, train_o2l, O2LTrainingOutcome,
    O2LTrainingReport,
};
pub use training::TrainSchedule;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId, Tensor};
use crate::dynamics::StateVector;
use crate::error::{Error, Result};

/// Latent-space state: `n_z` real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("latent vector contains non-finite values".into()));
        }
        Ok(LatentVector(values))
    }

    pub fn zeros(n: usize) -> Self {
        LatentVector(vec![0.0; n])
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

/// Per-grid-point observation quality in `[0, 1]`; 0 marks unobserved or
/// unusable points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityMask(Vec<f64>);

impl QualityMask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("quality mask values must lie in [0, 1]".into()));
        }
        Ok(QualityMask(values))
    }

    pub fn ones(n: usize) -> Self {
        QualityMask(vec![1.0; n])
    }

    pub fn zeros(n: usize) -> Self {
        QualityMask(vec![0.0; n])
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
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }
}

/// One dense layer: `y = act(x W + b)` for row-vector inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::Contract(format!(
                "bias shape {}x{} does not match weight {}x{}",
                bias.rows(),
                bias.cols(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(DenseLayer { weight, bias, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Plain (non-tape) forward pass through a layer stack.
pub(crate) fn forward_layers(layers: &[DenseLayer], input: &[f64]) -> Result<Vec<f64>> {
    let mut current = input.to_vec();
    for layer in layers {
        if current.len() != layer.input_dim() {
            return Err(Error::Contract(format!(
                "layer expects input of {} values, got {}",
                layer.input_dim(),
                current.len()
            )));
        }
        let x = Tensor::row(current);
        let h = x.matmul(&layer.weight)?.add(&layer.bias)?;
        current = h.data().iter().map(|v| layer.activation.apply(*v)).collect();
    }
    Ok(current)
}

/// Emit a layer stack into a tape with the weights baked in as constants.
/// `input` must be a `batch_rows x input_dim` node.
pub(crate) fn emit_layers_const(
    g: &mut GraphBuilder,
    layers: &[DenseLayer],
    input: NodeId,
    batch_rows: usize,
) -> Result<NodeId> {
    let mut current = input;
    for layer in layers {
        let w = g.constant(layer.weight.clone());
        let h = g.matmul(current, w)?;
        let biased = if batch_rows == 1 {
            let b = g.constant(layer.bias.clone());
            g.add(h, b)?
        } else {
            let ones = g.constant(Tensor::filled(batch_rows, 1, 1.0));
            let b = g.constant(layer.bias.clone());
            let broadcast = g.matmul(ones, b)?;
            g.add(h, broadcast)?
        };
        current = match layer.activation {
            Activation::Identity => biased,
            Activation::Tanh => g.tanh(biased)?,
        };
    }
    Ok(current)
}

/// Declare tape inputs for every layer's weight and bias, in parameter order.
pub(crate) fn declare_layer_inputs(
    g: &mut GraphBuilder,
    layers: &[DenseLayer],
) -> Vec<(NodeId, NodeId)> {
    layers
        .iter()
        .map(|l| {
            let w = g.input(l.weight.rows(), l.weight.cols());
            let b = g.input(1, l.bias.cols());
            (w, b)
        })
        .collect()
}

/// Emit a layer stack whose weights are tape inputs (for training).
pub(crate) fn emit_layers_bound(
    g: &mut GraphBuilder,
    layers: &[DenseLayer],
    bindings: &[(NodeId, NodeId)],
    input: NodeId,
    batch_rows: usize,
) -> Result<NodeId> {
    let mut current = input;
    for (layer, (w, b)) in layers.iter().zip(bindings) {
        let h = g.matmul(current, *w)?;
        let biased = if batch_rows == 1 {
            g.add(h, *b)?
        } else {
            let ones = g.constant(Tensor::filled(batch_rows, 1, 1.0));
            let broadcast = g.matmul(ones, *b)?;
            g.add(h, broadcast)?
        };
        current = match layer.activation {
            Activation::Identity => biased,
            Activation::Tanh => g.tanh(biased)?,
        };
    }
    Ok(current)
}

/// Flatten layer weights into a parameter vector (weight, bias per layer).
pub(crate) fn layer_params(layers: &[DenseLayer]) -> Vec<Tensor> {
    layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
}

/// Write a parameter vector produced by [`layer_params`] back into layers.
pub(crate) fn set_layer_params(layers: &mut [DenseLayer], params: &[Tensor]) {
    for (i, layer) in layers.iter_mut().enumerate() {
        layer.weight = params[2 * i].clone();
        layer.bias = params[2 * i + 1].clone();
    }
}

/// Per-coordinate affine normalization of model-space states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn fit(states: &[StateVector]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InsufficientSamples("no states for normalization".into()));
        }
        let n = states[0].len();
        let count = states.len() as f64;
        let mut mean = vec![0.0; n];
        for s in states {
            for (m, v) in mean.iter_mut().zip(s.values()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= count;
        }
        let mut var = vec![0.0; n];
        for s in states {
            for (i, v) in s.values().iter().enumerate() {
                var[i] += (v - mean[i]).powi(2);
            }
        }
        let denom = (count - 1.0).max(1.0);
        let scale: Vec<f64> = var.iter().map(|v| (v / denom).sqrt().max(1e-12)).collect();
        Ok(Normalization { mean, scale })
    }

    pub fn identity(n: usize) -> Self {
        Normalization { mean: vec![0.0; n], scale: vec![1.0; n] }
    }

    pub fn normalize(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeVariant {
    Linear,
    Mlp,
}

/// Encoder/decoder pair with the normalization of its training states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub variant: AeVariant,
    pub encoder: Vec<DenseLayer>,
    pub decoder: Vec<DenseLayer>,
    pub n_x: usize,
    pub n_z: usize,
    pub normalization: Normalization,
}

impl AutoencoderModel {
    /// Map a model-space state into the latent space.
    pub fn encode(&self, state: &StateVector) -> Result<LatentVector> {
        if state.len() != self.n_x {
            return Err(Error::Contract(format!(
                "encode expects {} values, got {}",
                self.n_x,
                state.len()
            )));
        }
        let normalized = self.normalization.normalize(state.values());
        LatentVector::new(forward_layers(&self.encoder, &normalized)?)
    }

    /// Map a latent vector back to model space.
    pub fn decode(&self, z: &LatentVector) -> Result<StateVector> {
        if z.len() != self.n_z {
            return Err(Error::Contract(format!(
                "decode expects {} values, got {}",
                self.n_z,
                z.len()
            )));
        }
        let normalized = forward_layers(&self.decoder, z.values())?;
        StateVector::new(self.normalization.denormalize(&normalized))
    }

    /// Mean squared reconstruction error per grid point, in model space.
    pub fn reconstruction_mse(&self, states: &[StateVector]) -> Result<f64> {
        if states.is_empty() {
            return Err(Error::InsufficientSamples("no states for reconstruction MSE".into()));
        }
        let mut total = 0.0;
        for s in states {
            let rec = self.decode(&self.encode(s)?)?;
            total += s
                .values()
                .iter()
                .zip(rec.values())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / s.len() as f64;
        }
        Ok(total / states.len() as f64)
    }
}

/// Observation-to-latent network. Input is the dense normalized observation
/// image concatenated with its quality mask (`2 * n_x` values); output is a
/// latent vector in the companion autoencoder's space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct O2LModel {
    pub layers: Vec<DenseLayer>,
    pub n_x: usize,
    pub n_z: usize,
    pub normalization: Normalization,
    /// Identity of the frozen autoencoder this network was trained against.
    pub ae_id: String,
}

/// Spatial loss weights from a quality mask: cyclic moving average of
/// width 5, rescaled so the minimum maps to 0.5 and the maximum to 1
/// (all 0.5 when the mask is constant), then resampled to latent length by
/// cyclic linear interpolation.
pub fn loss_weights(mask: &QualityMask, n_z: usize) -> Vec<f64> {
    let smoothed = cyclic_moving_average(mask.values(), 5);
    let rescaled = rescale_half_to_one(&smoothed);
    resample_cyclic(&rescaled, n_z)
}

pub(crate) fn cyclic_moving_average(values: &[f64], width: usize) -> Vec<f64> {
    let n = values.len() as i64;
    let half = (width / 2) as i64;
    (0..n)
        .map(|i| {
            let mut sum = 0.0;
            for o in -half..=half {
                sum += values[(((i + o) % n + n) % n) as usize];
            }
            sum / width as f64
        })
        .collect()
}

fn rescale_half_to_one(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| 0.5 + 0.5 * (v - min) / (max - min)).collect()
}

fn resample_cyclic(values: &[f64], target_len: usize) -> Vec<f64> {
    let n = values.len();
    (0..target_len)
        .map(|j| {
            let pos = j as f64 * n as f64 / target_len as f64;
            let i0 = pos.floor() as usize % n;
            let i1 = (i0 + 1) % n;
            let frac = pos - pos.floor();
            (1.0 - frac) * values[i0] + frac * values[i1]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_mask_maps_to_lower_bound() {
        for c in [0.0, 0.3, 1.0] {
            let mask = QualityMask::new(vec![c; 40]).unwrap();
            let w = loss_weights(&mask, 12);
            assert!(w.iter().all(|v| (*v - 0.5).abs() < 1e-15), "c = {c}");
        }
    }

    #[test]
    fn weights_stay_in_half_one() {
        let mask =
            QualityMask::new((0..40).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect())
                .unwrap();
        let w = loss_weights(&mask, 12);
        assert!(w.iter().all(|v| (0.5..=1.0).contains(v)));
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max > 0.5);
    }

    #[test]
    fn moving_average_is_cyclic() {
        let mut v = vec![0.0; 10];
        v[0] = 1.0;
        let s = cyclic_moving_average(&v, 5);
        assert!((s[0] - 0.2).abs() < 1e-15);
        assert!((s[9] - 0.2).abs() < 1e-15);
        assert!((s[8] - 0.2).abs() < 1e-15);
        assert!((s[5] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn mask_range_is_enforced() {
        assert!(QualityMask::new(vec![0.5, 1.2]).is_err());
        assert!(QualityMask::new(vec![-0.1]).is_err());
        assert!(QualityMask::new(vec![0.0, 1.0, 0.7]).is_ok());
    }

    #[test]
    fn normalization_roundtrip() {
        let states: Vec<StateVector> = (0..50)
            .map(|i| {
                StateVector::new((0..6).map(|j| (i as f64 * 0.3 + j as f64).sin() * 2.0).collect())
                    .unwrap()
            })
            .collect();
        let norm = Normalization::fit(&states).unwrap();
        let x = states[7].values();
        let back = norm.denormalize(&norm.normalize(x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
