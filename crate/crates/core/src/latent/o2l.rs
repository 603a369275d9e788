//! Observation-to-latent network: training against the frozen autoencoder's
//! encodings and the forward map used at assimilation time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{adam_step, AdamParams, AdamState, GraphBuilder, Tensor};
use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::latent::training::{lr_at, shuffle_indices, split_train_val, xavier, TrainSchedule};
use crate::latent::{
    ae_identity, declare_layer_inputs, emit_layers_bound, forward_layers, layer_params, loss_weights,
    set_layer_params, Activation, AutoencoderModel, DenseLayer, LatentVector, O2LModel, QualityMask,
};
use crate::observations::{apply_h, ObservationNetwork, ObservationSet};

#[derive(Debug, Clone, PartialEq)]
pub struct O2LTrainingReport {
    pub final_train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone)]
pub struct O2LTrainingOutcome {
    pub model: O2LModel,
    pub report: O2LTrainingReport,
}

/// One training presentation: network input, latent target and loss weights.
struct Presentation {
    input: Vec<f64>,
    target: Vec<f64>,
    weights: Vec<f64>,
}

fn make_presentation<R: Rng + ?Sized>(
    state: &StateVector,
    target: &LatentVector,
    network: &ObservationNetwork,
    ae: &AutoencoderModel,
    rng: &mut R,
) -> Result<Presentation> {
    let n_x = ae.n_x;
    let clean = apply_h(state, network)?;
    let mut image = vec![0.0; n_x];
    let mut mask = vec![0.0; n_x];
    for (pos, &idx) in network.observed_indices().iter().enumerate() {
        // Quality drawn uniformly in [0.5, 1]; noise grows as quality drops.
        let quality = rng.gen_range(0.5..=1.0);
        let sigma = network.noise_std()[pos] / quality;
        let noisy = if sigma > 0.0 {
            let dist = Normal::new(0.0, sigma)
                .map_err(|e| Error::Config(format!("bad noise std: {e}")))?;
            clean[pos] + dist.sample(rng)
        } else {
            clean[pos]
        };
        image[idx] = (noisy - ae.normalization.mean[idx]) / ae.normalization.scale[idx];
        mask[idx] = quality;
    }
    let weights = loss_weights(&QualityMask::new(mask.clone())?, ae.n_z);
    let mut input = image;
    input.extend_from_slice(&mask);
    Ok(Presentation { input, target: target.values().to_vec(), weights })
}

/// Train the observation-to-latent network against a frozen autoencoder.
///
/// The loss is the weight-masked squared error between the network output on
/// simulated noisy observations and the encoder's latent representation of
/// the same state. Deterministic given the seed.
pub fn train_o2l(
    ae: &AutoencoderModel,
    training_states: &[StateVector],
    network: &ObservationNetwork,
    hidden: &[usize],
    schedule: &TrainSchedule,
    rng_seed: u64,
) -> Result<O2LTrainingOutcome> {
    schedule.validate()?;
    if training_states.is_empty() {
        return Err(Error::InsufficientSamples("no training states".into()));
    }
    let n_x = ae.n_x;
    let n_z = ae.n_z;
    if training_states[0].len() != n_x {
        return Err(Error::Contract(format!(
            "training states have {} values, autoencoder expects {}",
            training_states[0].len(),
            n_x
        )));
    }

    let targets: Vec<LatentVector> =
        training_states.iter().map(|s| ae.encode(s)).collect::<Result<_>>()?;
    let pairs: Vec<(StateVector, LatentVector)> =
        training_states.iter().cloned().zip(targets).collect();
    let (train, val) = split_train_val(&pairs, schedule.validation_fraction);

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let dims: Vec<usize> = std::iter::once(2 * n_x)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(n_z))
        .collect();
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (k, w) in dims.windows(2).enumerate() {
        let activation =
            if k + 1 == dims.len() - 1 { Activation::Identity } else { Activation::Tanh };
        layers.push(DenseLayer::new(xavier(&mut rng, w[0], w[1]), Tensor::zeros(1, w[1]), activation)?);
    }

    let mut params = layer_params(&layers);
    let mut adam = AdamState::new(&params, AdamParams::with_learning_rate(schedule.learning_rate));

    let batches_per_epoch = train.len().div_ceil(schedule.batch_size);
    let total_steps = schedule.epochs * batches_per_epoch;
    let mut step = 0usize;
    let mut initial_loss: Option<f64> = None;
    let mut last_loss = f64::NAN;

    let mut indices: Vec<usize> = (0..train.len()).collect();
    for _epoch in 0..schedule.epochs {
        shuffle_indices(&mut indices, &mut rng);
        for chunk in indices.chunks(schedule.batch_size) {
            let rows = chunk.len();
            let mut inputs = Vec::with_capacity(rows * 2 * n_x);
            let mut targets = Vec::with_capacity(rows * n_z);
            let mut weights = Vec::with_capacity(rows * n_z);
            for &i in chunk {
                let p = make_presentation(&train[i].0, &train[i].1, network, ae, &mut rng)?;
                inputs.extend_from_slice(&p.input);
                targets.extend_from_slice(&p.target);
                weights.extend_from_slice(&p.weights);
            }

            let mut g = GraphBuilder::new();
            let bindings = declare_layer_inputs(&mut g, &layers);
            let input = g.constant(Tensor::new(rows, 2 * n_x, inputs)?);
            let target = g.constant(Tensor::new(rows, n_z, targets)?);
            let w = g.constant(Tensor::new(rows, n_z, weights)?);
            let out = emit_layers_bound(&mut g, &layers, &bindings, input, rows)?;
            let diff = g.sub(out, target)?;
            let weighted = g.mul(w, diff)?;
            let sse = g.sum_squares(weighted)?;
            let loss_node = g.scale(sse, 1.0 / (rows * n_z) as f64)?;
            let program = g.finish(loss_node)?;

            let (loss, grads) = program.eval_with_grad(&params)?;
            let init = *initial_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > 10.0 * init.max(1e-30) {
                return Err(Error::TrainingDiverged(format!(
                    "loss {loss:.6e} exceeded 10x the initial loss {init:.6e}"
                )));
            }
            adam.hyper.learning_rate =
                lr_at(step, total_steps, schedule.learning_rate, schedule.warmup_fraction);
            adam_step(&mut params, &grads, &mut adam)?;
            step += 1;
            last_loss = loss;
        }
    }
    set_layer_params(&mut layers, &params);

    let model = O2LModel {
        layers,
        n_x,
        n_z,
        normalization: ae.normalization.clone(),
        ae_id: ae_identity(ae)?,
    };

    // Validation loss with presentations drawn from a fixed derived stream.
    let eval_set = if val.is_empty() { &train } else { &val };
    let mut val_rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x5eed_0f0f_u64);
    let mut val_loss = 0.0;
    for (state, target) in eval_set.iter() {
        let p = make_presentation(state, target, network, ae, &mut val_rng)?;
        let out = forward_layers(&model.layers, &p.input)?;
        val_loss += out
            .iter()
            .zip(p.target.iter().zip(&p.weights))
            .map(|(o, (t, w))| (w * (o - t)).powi(2))
            .sum::<f64>()
            / n_z as f64;
    }
    val_loss /= eval_set.len() as f64;

    Ok(O2LTrainingOutcome {
        model,
        report: O2LTrainingReport { final_train_loss: last_loss, validation_loss: val_loss },
    })
}

/// Dense network input for an observation set: normalized values scattered
/// onto the grid followed by the quality mask.
pub fn build_o2l_input(model: &O2LModel, obs: &ObservationSet) -> Result<Vec<f64>> {
    if obs.n_x() != model.n_x {
        return Err(Error::Contract(format!(
            "observation grid {} does not match model n_x {}",
            obs.n_x(),
            model.n_x
        )));
    }
    let mut image = vec![0.0; model.n_x];
    for (pos, &idx) in obs.network.observed_indices().iter().enumerate() {
        let m = obs.mask.values()[idx];
        if m == 0.0 {
            if obs.values[pos] != 0.0 {
                return Err(Error::Contract(format!(
                    "nonzero observation value {} at masked-out index {}",
                    obs.values[pos], idx
                )));
            }
            continue;
        }
        image[idx] =
            (obs.values[pos] - model.normalization.mean[idx]) / model.normalization.scale[idx];
    }
    let mut input = image;
    input.extend_from_slice(obs.mask.values());
    Ok(input)
}

/// Map an observation set into the latent space.
pub fn o2l_forward(model: &O2LModel, obs: &ObservationSet) -> Result<LatentVector> {
    let input = build_o2l_input(model, obs)?;
    LatentVector::new(forward_layers(&model.layers, &input)?)
}

/// Observation-only analysis: the decoded latent observation.
pub fn observation_only_analysis(
    ae: &AutoencoderModel,
    o2l: &O2LModel,
    obs: &ObservationSet,
) -> Result<StateVector> {
    ae.decode(&o2l_forward(o2l, obs)?)
}
