//! JSON checkpoints for the autoencoder and observation-to-latent network.
//!
//! One schema covers both: `{variant, n_x, n_z, normalization, layers}` with
//! weights row-major. For autoencoders the layer list is the encoder followed
//! by the decoder; the split point is the first layer whose output width is
//! `n_z`. Round trips are value-exact.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::latent::{
    Activation, AeVariant, AutoencoderModel, DenseLayer, Normalization, O2LModel,
};

#[derive(Debug, Serialize, Deserialize)]
struct LayerJson {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormalizationJson {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AeCheckpoint {
    variant: AeVariant,
    n_x: usize,
    n_z: usize,
    normalization: NormalizationJson,
    layers: Vec<LayerJson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct O2lCheckpoint {
    variant: String,
    n_x: usize,
    n_z: usize,
    ae_id: String,
    normalization: NormalizationJson,
    layers: Vec<LayerJson>,
}

fn layer_to_json(layer: &DenseLayer) -> LayerJson {
    LayerJson {
        rows: layer.weight.rows(),
        cols: layer.weight.cols(),
        weights: layer.weight.data().to_vec(),
        bias: layer.bias.data().to_vec(),
        activation: layer.activation,
    }
}

fn layer_from_json(j: &LayerJson) -> Result<DenseLayer> {
    DenseLayer::new(
        Tensor::new(j.rows, j.cols, j.weights.clone())?,
        Tensor::new(1, j.cols, j.bias.clone())?,
        j.activation,
    )
}

pub fn save_ae<W: Write>(model: &AutoencoderModel, writer: &mut W) -> Result<()> {
    let doc = AeCheckpoint {
        variant: model.variant,
        n_x: model.n_x,
        n_z: model.n_z,
        normalization: NormalizationJson {
            mean: model.normalization.mean.clone(),
            scale: model.normalization.scale.clone(),
        },
        layers: model.encoder.iter().chain(&model.decoder).map(layer_to_json).collect(),
    };
    serde_json::to_writer_pretty(writer, &doc)?;
    Ok(())
}

pub fn load_ae<R: Read>(reader: &mut R) -> Result<AutoencoderModel> {
    let doc: AeCheckpoint = serde_json::from_reader(reader)?;
    let layers: Vec<DenseLayer> = doc.layers.iter().map(layer_from_json).collect::<Result<_>>()?;
    // Encoder ends at the first layer that outputs the latent width.
    let split = layers
        .iter()
        .position(|l| l.output_dim() == doc.n_z)
        .ok_or_else(|| Error::Serialization("no layer outputs the latent width".into()))?;
    let (enc, dec) = layers.split_at(split + 1);
    let model = AutoencoderModel {
        variant: doc.variant,
        encoder: enc.to_vec(),
        decoder: dec.to_vec(),
        n_x: doc.n_x,
        n_z: doc.n_z,
        normalization: Normalization {
            mean: doc.normalization.mean,
            scale: doc.normalization.scale,
        },
    };
    if model.encoder.is_empty() || model.decoder.is_empty() {
        return Err(Error::Serialization("checkpoint is missing encoder or decoder layers".into()));
    }
    Ok(model)
}

pub fn save_o2l<W: Write>(model: &O2LModel, writer: &mut W) -> Result<()> {
    let doc = O2lCheckpoint {
        variant: "o2l".into(),
        n_x: model.n_x,
        n_z: model.n_z,
        ae_id: model.ae_id.clone(),
        normalization: NormalizationJson {
            mean: model.normalization.mean.clone(),
            scale: model.normalization.scale.clone(),
        },
        layers: model.layers.iter().map(layer_to_json).collect(),
    };
    serde_json::to_writer_pretty(writer, &doc)?;
    Ok(())
}

pub fn load_o2l<R: Read>(reader: &mut R) -> Result<O2LModel> {
    let doc: O2lCheckpoint = serde_json::from_reader(reader)?;
    if doc.variant != "o2l" {
        return Err(Error::Serialization(format!(
            "expected an o2l checkpoint, found variant {:?}",
            doc.variant
        )));
    }
    Ok(O2LModel {
        layers: doc.layers.iter().map(layer_from_json).collect::<Result<_>>()?,
        n_x: doc.n_x,
        n_z: doc.n_z,
        normalization: Normalization {
            mean: doc.normalization.mean,
            scale: doc.normalization.scale,
        },
        ae_id: doc.ae_id,
    })
}

/// Stable identifier of a trained autoencoder: FNV-1a over its serialized
/// form. Used to pair an observation network with the autoencoder it was
/// trained against.
pub fn ae_identity(model: &AutoencoderModel) -> Result<String> {
    let mut bytes = Vec::new();
    save_ae(model, &mut bytes)?;
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{hash:016x}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StateVector;
    use crate::latent::{fit_linear_ae, train_o2l, TrainSchedule};
    use crate::observations::ObservationNetwork;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_states(n: usize, count: usize, seed: u64) -> Vec<StateVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                StateVector::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn ae_roundtrip_is_value_exact() {
        let data = random_states(8, 100, 1);
        let model = fit_linear_ae(&data, 3).unwrap();
        let mut buf = Vec::new();
        save_ae(&model, &mut buf).unwrap();
        let loaded = load_ae(&mut buf.as_slice()).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn o2l_roundtrip_is_value_exact() {
        let data = random_states(8, 64, 2);
        let ae = fit_linear_ae(&data, 3).unwrap();
        let network = ObservationNetwork::new(vec![0, 4], vec![0.1; 2]).unwrap();
        let schedule = TrainSchedule {
            epochs: 1,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_fraction: 0.05,
            validation_fraction: 0.0,
        };
        let out = train_o2l(&ae, &data, &network, &[5], &schedule, 3).unwrap();
        let mut buf = Vec::new();
        save_o2l(&out.model, &mut buf).unwrap();
        let loaded = load_o2l(&mut buf.as_slice()).unwrap();
        assert_eq!(out.model, loaded);
    }

    #[test]
    fn identity_is_stable_and_discriminating() {
        let data = random_states(8, 100, 1);
        let a = fit_linear_ae(&data, 3).unwrap();
        let b = fit_linear_ae(&data, 4).unwrap();
        assert_eq!(ae_identity(&a).unwrap(), ae_identity(&a).unwrap());
        assert_ne!(ae_identity(&a).unwrap(), ae_identity(&b).unwrap());
    }
}
