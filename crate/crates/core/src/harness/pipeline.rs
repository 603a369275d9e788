//! Preparation stage: climatology generation, model training, and the
//! climatological covariance estimates, bundled for the cycling runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::assimilation::hloba_update;
use crate::covariance::{
    clim_latent_r, floor, hybrid_blend, inflate, nmc_latent_b, nmc_model_b, DiagonalCovariance,
    FullCovariance,
};
use crate::dynamics::{forecast_state, ModelConfig, StateVector};
use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::harness::metrics::build_qc_thresholds;
use crate::latent::{
    fit_linear_ae, o2l_forward, train_mlp_ae, train_o2l, Activation, AeVariant, AutoencoderModel,
    O2LModel,
};
use crate::observations::{synthesize_observations, ObservationNetwork, ObservationSet};

/// Noise level below which the solver observation-error variance is floored,
/// keeping the variational costs well posed in zero-noise experiments.
pub const NOISE_LEVEL_FLOOR: f64 = 1e-4;

const SPINUP_INTERVALS: usize = 500;

/// Everything a cycling run needs besides its configuration: trained
/// networks, the observation network and the climatological covariances.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub model: ModelConfig,
    pub ae: AutoencoderModel,
    pub o2l: O2LModel,
    /// Network used to synthesize observations (true noise, possibly zero).
    pub network_synth: ObservationNetwork,
    /// Same indices with the floored noise used as the solver R.
    pub network_r: ObservationNetwork,
    pub sigma_clim: Vec<f64>,
    /// Variance of the encoded climatology per latent dimension.
    pub clim_latent_var: DiagonalCovariance,
    pub bz_clim: DiagonalCovariance,
    pub rz_clim: DiagonalCovariance,
    pub b_clim_model: FullCovariance,
    /// Absolute latent variance floor.
    pub latent_floor: f64,
    pub qc_thresholds: Vec<f64>,
    /// Validation reconstruction MSE of the autoencoder (model space).
    pub ae_validation_mse: f64,
}

impl Pipeline {
    /// Blend, inflate and floor the latent background covariance.
    pub fn blended_bz(
        &self,
        ens: Option<&DiagonalCovariance>,
        alpha_ens: f64,
        inflation: f64,
    ) -> Result<DiagonalCovariance> {
        let blended = match ens {
            Some(e) => hybrid_blend(&self.bz_clim, e, alpha_ens)?,
            None => self.bz_clim.clone(),
        };
        floor(&inflate(&blended, inflation)?, self.latent_floor)
    }

    /// Blend, inflate and floor the latent observation covariance.
    pub fn blended_rz(
        &self,
        ens: Option<&DiagonalCovariance>,
        beta_ens: f64,
        inflation: f64,
    ) -> Result<DiagonalCovariance> {
        let blended = match ens {
            Some(e) => hybrid_blend(&self.rz_clim, e, beta_ens)?,
            None => self.rz_clim.clone(),
        };
        floor(&inflate(&blended, inflation)?, self.latent_floor)
    }
}

/// Deterministic climatological state on the attractor for a given seed.
pub fn attractor_state(model: &ModelConfig, seed: u64) -> Result<StateVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = StateVector::uniform(model.n_x, model.forcing.max(1.0));
    for v in state.values_mut() {
        *v += rng.gen_range(-0.5..0.5);
    }
    forecast_state(&state, SPINUP_INTERVALS * model.steps_per_da_interval, model)
}

/// Long free run sampled once per DA interval, after a spin-up.
pub fn generate_climatology(
    model: &ModelConfig,
    n_states: usize,
    seed: u64,
) -> Result<Vec<StateVector>> {
    let mut state = attractor_state(model, seed)?;
    let mut out = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        out.push(state.clone());
        state = forecast_state(&state, model.steps_per_da_interval, model)?;
    }
    Ok(out)
}

fn per_coordinate_std(states: &[StateVector]) -> Vec<f64> {
    let n = states[0].len();
    let count = states.len() as f64;
    let mut mean = vec![0.0; n];
    for s in states {
        for (m, v) in mean.iter_mut().zip(s.values()) {
            *m += v / count;
        }
    }
    let mut var = vec![0.0; n];
    for s in states {
        for (i, v) in s.values().iter().enumerate() {
            var[i] += (v - mean[i]).powi(2);
        }
    }
    var.into_iter().map(|v| (v / (count - 1.0)).sqrt()).collect()
}

fn encoded_variance(ae: &AutoencoderModel, states: &[StateVector]) -> Result<DiagonalCovariance> {
    let n_z = ae.n_z;
    let count = states.len() as f64;
    let mut mean = vec![0.0; n_z];
    let encoded: Vec<Vec<f64>> = states
        .iter()
        .map(|s| ae.encode(s).map(|z| z.into_values()))
        .collect::<Result<_>>()?;
    for z in &encoded {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v / count;
        }
    }
    let mut var = vec![0.0; n_z];
    for z in &encoded {
        for (i, v) in z.iter().enumerate() {
            var[i] += (v - mean[i]).powi(2);
        }
    }
    DiagonalCovariance::new(var.into_iter().map(|v| v / (count - 1.0)).collect())
}

/// Result of the bootstrap assimilation run: lagged forecast pairs for the
/// climatological covariance estimates.
pub struct NmcPairs {
    /// (shorter-lead, longer-lead) forecasts valid at the same time.
    pub pairs: Vec<(StateVector, StateVector)>,
}

/// Run a plain latent assimilation loop (climatological covariances only,
/// one slot per interval) and derive lagged forecast pairs from its
/// analysis archive: the 4-interval and 8-interval forecasts valid at the
/// same time.
pub fn bootstrap_nmc_pairs(
    model: &ModelConfig,
    ae: &AutoencoderModel,
    o2l: &O2LModel,
    network: &ObservationNetwork,
    bz0: &DiagonalCovariance,
    rz0: &DiagonalCovariance,
    intervals: usize,
    seed: u64,
) -> Result<NmcPairs> {
    const SHORT_LEAD: usize = 4;
    const LONG_LEAD: usize = 8;
    const BOOTSTRAP_SKIP: usize = 50;
    if intervals < BOOTSTRAP_SKIP + LONG_LEAD + 20 {
        return Err(Error::Config(format!(
            "bootstrap needs at least {} intervals, got {intervals}",
            BOOTSTRAP_SKIP + LONG_LEAD + 20
        )));
    }

    let mut truth = attractor_state(model, seed ^ 0xb007)?;
    let mut obs_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007_0b5);
    // Climatological-quality initial background: an independent attractor
    // state.
    let mut x_b = attractor_state(model, seed ^ 0xb007_b9)?;

    let mut analyses: Vec<StateVector> = Vec::with_capacity(intervals);
    for t in 0..intervals {
        let obs = synthesize_observations(&truth, network, t as i64, &mut obs_rng)?;
        let z_b = ae.encode(&x_b)?;
        let z_o = o2l_forward(o2l, &obs)?;
        let (z_a, _) = hloba_update(&z_b, &z_o, bz0, rz0)?;
        let x_a = ae.decode(&z_a)?;
        analyses.push(x_a.clone());
        truth = forecast_state(&truth, model.steps_per_da_interval, model)?;
        x_b = forecast_state(&x_a, model.steps_per_da_interval, model)?;
    }

    let mut pairs = Vec::new();
    for t in (BOOTSTRAP_SKIP + LONG_LEAD)..intervals {
        let short = forecast_state(
            &analyses[t - SHORT_LEAD],
            SHORT_LEAD * model.steps_per_da_interval,
            model,
        )?;
        let long = forecast_state(
            &analyses[t - LONG_LEAD],
            LONG_LEAD * model.steps_per_da_interval,
            model,
        )?;
        pairs.push((short, long));
    }
    Ok(NmcPairs { pairs })
}

/// Train everything and estimate the climatological covariances.
pub fn build_pipeline(cfg: &Config, seed: u64) -> Result<Pipeline> {
    cfg.validate()?;
    let model = cfg.model.clone();

    let climatology = generate_climatology(&model, cfg.latent.archive_size, seed ^ 0xc11a)?;
    let sigma_clim = per_coordinate_std(&climatology);

    let network_synth = ObservationNetwork::every_kth(
        model.n_x,
        cfg.observations.spacing,
        cfg.observations.noise_level,
        &sigma_clim,
    )?;
    let network_r = ObservationNetwork::every_kth(
        model.n_x,
        cfg.observations.spacing,
        cfg.observations.noise_level.max(NOISE_LEVEL_FLOOR),
        &sigma_clim,
    )?;

    let schedule = cfg.latent.schedule();
    let (ae, ae_validation_mse) = match cfg.latent.variant {
        AeVariant::Linear => {
            let split = (climatology.len() as f64 * (1.0 - schedule.validation_fraction)) as usize;
            let ae = fit_linear_ae(&climatology[..split], cfg.latent.n_z)?;
            let mse = ae.reconstruction_mse(&climatology[split..])?;
            (ae, mse)
        }
        AeVariant::Mlp => {
            let out = train_mlp_ae(
                &climatology,
                cfg.latent.n_z,
                &cfg.latent.encoder_hidden,
                Activation::Tanh,
                &schedule,
                seed ^ 0xae,
            )?;
            let mse = out.report.validation_mse;
            (out.model, mse)
        }
    };

    let o2l = train_o2l(
        &ae,
        &climatology,
        &network_synth,
        &cfg.latent.o2l_hidden,
        &schedule,
        seed ^ 0x021,
    )?
    .model;

    let clim_latent_var = encoded_variance(&ae, &climatology)?;
    let mean_clim_var = clim_latent_var.variances().iter().sum::<f64>()
        / clim_latent_var.len().max(1) as f64;
    let latent_floor = (cfg.covariance.variance_floor_rel * mean_clim_var).max(1e-300);

    let mut r_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0bc);
    let rz_clim = floor(
        &clim_latent_r(&o2l, &ae, &climatology, &network_synth, &mut r_rng)?,
        latent_floor,
    )?;

    let bz0 = floor(&clim_latent_var, latent_floor)?;
    let nmc = bootstrap_nmc_pairs(
        &model,
        &ae,
        &o2l,
        &network_synth,
        &bz0,
        &rz_clim,
        cfg.covariance.nmc_bootstrap_intervals,
        seed,
    )?;
    let bz_clim = floor(&nmc_latent_b(&ae, &nmc.pairs)?, latent_floor)?;
    let b_clim_model = nmc_model_b(&nmc.pairs, f64::INFINITY)?;

    let qc_thresholds = build_qc_thresholds(&climatology, cfg.observations.qc_lag_intervals)?;

    Ok(Pipeline {
        model,
        ae,
        o2l,
        network_synth,
        network_r,
        sigma_clim,
        clim_latent_var,
        bz_clim,
        rz_clim,
        b_clim_model,
        latent_floor,
        qc_thresholds,
        ae_validation_mse,
    })
}

/// Rewrap an observation set so the solver-facing noise (R) uses the floored
/// network while the values keep their true synthesis noise.
pub fn with_solver_noise(obs: &ObservationSet, network_r: &ObservationNetwork) -> Result<ObservationSet> {
    ObservationSet::new(network_r.clone(), obs.values.clone(), obs.mask.clone(), obs.cycle_time)
}

/// Gaussian perturbation scaled per coordinate.
pub fn perturb_state<R: Rng + ?Sized>(
    state: &StateVector,
    sigma: &[f64],
    scale: f64,
    rng: &mut R,
) -> Result<StateVector> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    StateVector::new(
        state
            .values()
            .iter()
            .zip(sigma)
            .map(|(v, s)| v + scale * s * normal.sample(rng))
            .collect(),
    )
}
