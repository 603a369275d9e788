//! Cycling assimilation-forecast experiments.
//!
//! Each cycle assimilates a window of observation slots (sequentially for
//! 3-D methods, jointly for window methods), archives the per-interval
//! analyses for time-lagged ensembles, issues a verification forecast and
//! records errors and diagnosed uncertainty. Runs are deterministic per
//! seed: observation noise, the withheld split and ensemble perturbations
//! draw from separate seeded streams so paired runs share their truth and
//! observations.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assimilation::{
    hloba_sequential_window, solve_3dvar, solve_4dvar, solve_l3dvar, solve_l4dvar, MethodKind,
};
use crate::covariance::{
    assemble_time_lagged_ensemble, ensemble_cov_diag, ensemble_latent_r, ensemble_model_b,
    DiagonalCovariance, EnsembleRMode, FullCovariance,
};
use crate::dynamics::{forecast_state, StateVector};
use crate::error::{Error, Result};
use crate::harness::config::{Config, ExperimentMode};
use crate::harness::metrics::{obs_rmse, weighted_rmse};
use crate::harness::pipeline::{attractor_state, perturb_state, with_solver_noise, Pipeline};
use crate::latent::{o2l_forward, LatentVector};
use crate::observations::{qc_filter, split_withheld, synthesize_observations, ObservationSet};

const TRUTH_SALT: u64 = 0x7247;
const OBS_SALT: u64 = 0x0b5e;
const INIT_SALT: u64 = 0x1217;
const ENS_SALT: u64 = 0xe25e;
const SPLIT_SALT: u64 = 0x5711;

/// Initial background error as a fraction of the climatological spread.
const INITIAL_BACKGROUND_SPREAD: f64 = 0.25;

fn stream_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

/// Latent diagnostics recorded at the final slot of each cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCycleDiagnostics {
    /// Signed background error in latent space.
    pub zb_error: Vec<f64>,
    /// Signed observation-map error in latent space.
    pub zo_error: Vec<f64>,
    pub bz_clim: Vec<f64>,
    pub bz_ens: Option<Vec<f64>>,
    pub rz_clim: Vec<f64>,
    pub rz_ens: Option<Vec<f64>>,
}

/// One assimilation cycle's errors, uncertainty and bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Analysis WRMSE against truth at the final window slot.
    pub analysis_wrmse: f64,
    pub slot_analysis_wrmse: Vec<f64>,
    /// Forecast WRMSE (or observation RMSE in imperfect-reference mode) at
    /// leads 1..=horizon.
    pub forecast_wrmse: Vec<f64>,
    pub mean_diag_std: Option<f64>,
    /// Diagnosed per-grid-point analysis standard deviation.
    pub diagnosed_std: Option<Vec<f64>>,
    /// |analysis - truth| per grid point at the final slot.
    pub abs_analysis_error: Vec<f64>,
    /// Signed background error at the final slot (for decorrelation).
    pub background_error: Vec<f64>,
    /// Signed observation-only-analysis error (for decorrelation).
    pub ooa_error: Vec<f64>,
    pub ooa_wrmse: f64,
    pub obs_rmse_withheld: Option<f64>,
    pub solver_iterations: usize,
    pub flags: Vec<String>,
    pub latent: Option<LatentCycleDiagnostics>,
}

struct Forcings {
    truth: Vec<f64>,
    model: Vec<f64>,
    window: usize,
}

impl Forcings {
    fn build(cfg: &Config, schedule: Option<&[f64]>) -> Result<Forcings> {
        let cycles = cfg.experiment.cycles;
        if let Some(s) = schedule {
            if s.len() != cycles {
                return Err(Error::Contract(format!(
                    "forcing schedule length {} does not match {} cycles",
                    s.len(),
                    cycles
                )));
            }
            // Both the truth and the assimilating model follow the schedule:
            // the regime drifts but the model stays perfect.
            Ok(Forcings { truth: s.to_vec(), model: s.to_vec(), window: cfg.method.window_slots })
        } else {
            let truth_f = match cfg.experiment.mode {
                ExperimentMode::IdealizedTwin => cfg.model.forcing,
                ExperimentMode::ImperfectReference => cfg.experiment.truth_forcing,
            };
            Ok(Forcings {
                truth: vec![truth_f; cycles],
                model: vec![cfg.model.forcing; cycles],
                window: cfg.method.window_slots,
            })
        }
    }

    fn cycle_of_interval(&self, t: i64) -> usize {
        ((t.max(0) as usize) / self.window).min(self.truth.len() - 1)
    }

    fn truth_at(&self, t: i64) -> f64 {
        self.truth[self.cycle_of_interval(t)]
    }

    fn model_at(&self, t: i64) -> f64 {
        self.model[self.cycle_of_interval(t)]
    }
}

/// Truth trajectory generated lazily, one state per DA interval.
struct TruthStream<'a> {
    states: Vec<StateVector>,
    pipe: &'a Pipeline,
    forcings: &'a Forcings,
}

impl TruthStream<'_> {
    fn get(&mut self, t: i64) -> Result<StateVector> {
        while self.states.len() as i64 <= t {
            let from = self.states.len() as i64 - 1;
            let model = self.pipe.model.with_forcing(self.forcings.truth_at(from));
            let next =
                forecast_state(&self.states[from as usize], model.steps_per_da_interval, &model)?;
            self.states.push(next);
        }
        Ok(self.states[t as usize].clone())
    }
}

/// Observation sets generated lazily in time order from one noise stream,
/// so every method sees identical observations for a given seed.
struct ObsCache<'a> {
    sets: Vec<ObservationSet>,
    rng: ChaCha8Rng,
    pipe: &'a Pipeline,
}

impl ObsCache<'_> {
    fn get(&mut self, t: i64, truth: &mut TruthStream) -> Result<ObservationSet> {
        while self.sets.len() as i64 <= t {
            let tt = self.sets.len() as i64;
            let truth_state = truth.get(tt)?;
            let raw =
                synthesize_observations(&truth_state, &self.pipe.network_synth, tt, &mut self.rng)?;
            self.sets.push(with_solver_noise(&raw, &self.pipe.network_r)?);
        }
        Ok(self.sets[t as usize].clone())
    }
}

/// Covariances used at one slot, plus the raw ensemble estimates for the
/// calibration diagnostics.
struct SlotCovs {
    bz: DiagonalCovariance,
    rz: DiagonalCovariance,
    bz_ens_raw: Option<Vec<f64>>,
    rz_ens_raw: Option<Vec<f64>>,
    spinup: bool,
}

struct RunContext<'a> {
    cfg: &'a Config,
    pipe: &'a Pipeline,
    forcings: &'a Forcings,
    archive: BTreeMap<i64, StateVector>,
    ens_rng: ChaCha8Rng,
}

impl RunContext<'_> {
    fn advance_model(&self, state: &StateVector, from_t: i64) -> Result<StateVector> {
        let model = self.pipe.model.with_forcing(self.forcings.model_at(from_t));
        forecast_state(state, model.steps_per_da_interval, &model)
    }

    fn ensemble_at(&mut self, t: i64) -> Result<Option<crate::covariance::EnsembleSet>> {
        let size = self.cfg.covariance.ensemble_size;
        let pipe = self.pipe;
        let forcings = self.forcings;
        let result = assemble_time_lagged_ensemble(&self.archive, t, size, |state, from_t| {
            let model = pipe.model.with_forcing(forcings.model_at(from_t));
            forecast_state(state, model.steps_per_da_interval, &model)
        });
        match result {
            Ok(ens) => Ok(Some(ens)),
            Err(Error::SpinUp(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Latent covariances for one slot, refreshing the time-lagged ensemble.
    fn latent_covs(&mut self, t: i64, obs: &ObservationSet) -> Result<SlotCovs> {
        let cov_cfg = &self.cfg.covariance;
        let members = self.ensemble_at(t)?;
        let (bz_ens, rz_ens) = match &members {
            Some(ens) => {
                let encoded: Vec<LatentVector> =
                    ens.members.iter().map(|m| self.pipe.ae.encode(m)).collect::<Result<_>>()?;
                let bz = ensemble_cov_diag(&encoded)?;
                let mode = if cov_cfg.rz_ens_centered {
                    EnsembleRMode::Centered
                } else {
                    EnsembleRMode::Uncentered
                };
                let rz = ensemble_latent_r(
                    &self.pipe.o2l,
                    &self.pipe.ae,
                    ens,
                    &self.pipe.network_r,
                    &obs.mask,
                    mode,
                    &mut self.ens_rng,
                )?;
                (Some(bz), Some(rz))
            }
            None => (None, None),
        };
        let bz = self.pipe.blended_bz(bz_ens.as_ref(), cov_cfg.alpha_ens, cov_cfg.inflation_b)?;
        let rz = self.pipe.blended_rz(rz_ens.as_ref(), cov_cfg.beta_ens, cov_cfg.inflation_r)?;
        Ok(SlotCovs {
            bz,
            rz,
            bz_ens_raw: bz_ens.map(|c| c.variances().to_vec()),
            rz_ens_raw: rz_ens.map(|c| c.variances().to_vec()),
            spinup: members.is_none(),
        })
    }

    /// Hybrid model-space background covariance for one slot.
    fn model_b(&mut self, t: i64) -> Result<(FullCovariance, bool)> {
        let cov_cfg = &self.cfg.covariance;
        match self.ensemble_at(t)? {
            Some(ens) => {
                let b_ens = ensemble_model_b(&ens, cov_cfg.localization_radius)?;
                let blended = self.pipe.b_clim_model.blend(&b_ens, cov_cfg.alpha_ens)?;
                Ok((blended, false))
            }
            None => Ok((self.pipe.b_clim_model.clone(), true)),
        }
    }
}

struct WindowOutcome {
    analyses: Vec<StateVector>,
    backgrounds: Vec<StateVector>,
    iterations: usize,
    spinup: bool,
    stalled: bool,
    diagnosed_variance: Option<Vec<f64>>,
    bz_ens_final: Option<Vec<f64>>,
    rz_ens_final: Option<Vec<f64>>,
}

/// Run one cycling experiment. `forcing_schedule`, when given, holds one
/// forcing value per cycle and applies to both the truth and the model.
pub fn run_cycling_experiment(
    cfg: &Config,
    pipe: &Pipeline,
    forcing_schedule: Option<&[f64]>,
) -> Result<Vec<CycleRecord>> {
    cfg.validate()?;
    let seed = cfg.experiment.seed;
    let window = cfg.method.window_slots;
    let cycles = cfg.experiment.cycles;
    let horizon = cfg.experiment.verification_horizon;
    let method = cfg.method.name;
    let settings = cfg.method.variational_settings();
    let n_x = cfg.model.n_x;
    let uniform_weights = vec![1.0; n_x];
    let forcings = Forcings::build(cfg, forcing_schedule)?;

    let truth0 = attractor_state(
        &cfg.model.with_forcing(forcings.truth_at(0)),
        seed ^ TRUTH_SALT,
    )?;
    let mut truth = TruthStream { states: vec![truth0], pipe, forcings: &forcings };
    let mut obs_cache = ObsCache { sets: Vec::new(), rng: stream_rng(seed, OBS_SALT), pipe };

    let mut init_rng = stream_rng(seed, INIT_SALT);
    let mut x_b = perturb_state(
        &truth.get(0)?,
        &pipe.sigma_clim,
        INITIAL_BACKGROUND_SPREAD,
        &mut init_rng,
    )?;

    let mut ctx = RunContext {
        cfg,
        pipe,
        forcings: &forcings,
        archive: BTreeMap::new(),
        ens_rng: stream_rng(seed, ENS_SALT),
    };

    let clim_level =
        (pipe.sigma_clim.iter().map(|s| s * s).sum::<f64>() / n_x as f64).sqrt();
    let mut consecutive_divergent = 0usize;

    let withheld_fraction = cfg.observations.withheld_fraction;
    let mut records = Vec::with_capacity(cycles);

    for cycle in 0..cycles {
        let t0 = (cycle * window) as i64;
        let t_final = t0 + window as i64 - 1;

        // Window observations: split off the withheld subset (fixed
        // partition per seed) and apply quality control against the
        // background trajectory.
        let mut window_obs = Vec::with_capacity(window);
        let mut window_withheld: Vec<Option<ObservationSet>> = Vec::with_capacity(window);
        for slot in 0..window {
            let full = obs_cache.get(t0 + slot as i64, &mut truth)?;
            if withheld_fraction > 0.0 {
                let mut split_rng = stream_rng(seed, SPLIT_SALT);
                let (assim, withheld) = split_withheld(&full, withheld_fraction, &mut split_rng)?;
                window_obs.push(assim);
                window_withheld.push(Some(withheld));
            } else {
                window_obs.push(full);
                window_withheld.push(None);
            }
        }
        if cfg.observations.qc_enabled {
            let mut reference = x_b.clone();
            for slot in 0..window {
                if slot > 0 {
                    reference = ctx.advance_model(&reference, t0 + slot as i64 - 1)?;
                }
                window_obs[slot] =
                    qc_filter(&window_obs[slot], &reference, &pipe.qc_thresholds)?;
            }
        }

        let outcome = run_window(&mut ctx, method, &settings, &x_b, &window_obs, t0)?;

        for (slot, analysis) in outcome.analyses.iter().enumerate() {
            ctx.archive.insert(t0 + slot as i64, analysis.clone());
        }

        let truth_final = truth.get(t_final)?;
        let final_analysis = outcome.analyses.last().expect("window is non-empty").clone();
        let final_background = outcome.backgrounds.last().expect("window is non-empty").clone();

        let analysis_wrmse = weighted_rmse(&final_analysis, &truth_final, &uniform_weights)?;
        let mut slot_analysis_wrmse = Vec::with_capacity(window);
        for (slot, analysis) in outcome.analyses.iter().enumerate() {
            let truth_slot = truth.get(t0 + slot as i64)?;
            slot_analysis_wrmse.push(weighted_rmse(analysis, &truth_slot, &uniform_weights)?);
        }

        let abs_analysis_error: Vec<f64> = final_analysis
            .values()
            .iter()
            .zip(truth_final.values())
            .map(|(a, t)| (a - t).abs())
            .collect();
        let background_error: Vec<f64> = final_background
            .values()
            .iter()
            .zip(truth_final.values())
            .map(|(a, t)| a - t)
            .collect();

        // Observation-only analysis at the final slot.
        let final_obs = &window_obs[window - 1];
        let ooa = pipe.ae.decode(&o2l_forward(&pipe.o2l, final_obs)?)?;
        let ooa_wrmse = weighted_rmse(&ooa, &truth_final, &uniform_weights)?;
        let ooa_error: Vec<f64> =
            ooa.values().iter().zip(truth_final.values()).map(|(a, t)| a - t).collect();

        let latent = if method.is_latent() {
            let z_truth = pipe.ae.encode(&truth_final)?;
            let z_b = pipe.ae.encode(&final_background)?;
            let z_o = o2l_forward(&pipe.o2l, final_obs)?;
            Some(LatentCycleDiagnostics {
                zb_error: z_b
                    .values()
                    .iter()
                    .zip(z_truth.values())
                    .map(|(a, b)| a - b)
                    .collect(),
                zo_error: z_o
                    .values()
                    .iter()
                    .zip(z_truth.values())
                    .map(|(a, b)| a - b)
                    .collect(),
                bz_clim: pipe.bz_clim.variances().to_vec(),
                bz_ens: outcome.bz_ens_final.clone(),
                rz_clim: pipe.rz_clim.variances().to_vec(),
                rz_ens: outcome.rz_ens_final.clone(),
            })
        } else {
            None
        };

        let (diagnosed_std, mean_diag_std) = match &outcome.diagnosed_variance {
            Some(var) => {
                let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
                let mean = std.iter().sum::<f64>() / std.len() as f64;
                (Some(std), Some(mean))
            }
            None => (None, None),
        };

        let obs_rmse_withheld = match &window_withheld[window - 1] {
            Some(withheld) if !withheld.network.is_empty() => {
                Some(obs_rmse(&final_analysis, withheld)?)
            }
            _ => None,
        };

        // Verification forecast from the final analysis.
        let mut forecast_wrmse = Vec::with_capacity(horizon);
        let mut fc_state = final_analysis.clone();
        for lead in 1..=horizon as i64 {
            fc_state = ctx.advance_model(&fc_state, t_final + lead - 1)?;
            let err = match cfg.experiment.mode {
                ExperimentMode::IdealizedTwin => {
                    let truth_lead = truth.get(t_final + lead)?;
                    weighted_rmse(&fc_state, &truth_lead, &uniform_weights)?
                }
                ExperimentMode::ImperfectReference => {
                    let obs_lead = obs_cache.get(t_final + lead, &mut truth)?;
                    obs_rmse(&fc_state, &obs_lead)?
                }
            };
            forecast_wrmse.push(err);
        }

        let mut flags = Vec::new();
        if outcome.spinup {
            flags.push("spinup".to_string());
        }
        if outcome.stalled {
            flags.push("stalled".to_string());
        }

        records.push(CycleRecord {
            cycle,
            analysis_wrmse,
            slot_analysis_wrmse,
            forecast_wrmse,
            mean_diag_std,
            diagnosed_std,
            abs_analysis_error,
            background_error,
            ooa_error,
            ooa_wrmse,
            obs_rmse_withheld,
            solver_iterations: outcome.iterations,
            flags,
            latent,
        });

        if analysis_wrmse > 10.0 * clim_level {
            consecutive_divergent += 1;
            if consecutive_divergent >= 10 {
                return Err(Error::ExperimentDiverged(format!(
                    "analysis error above 10x climatology for 10 consecutive cycles (cycle {cycle})"
                )));
            }
        } else {
            consecutive_divergent = 0;
        }

        x_b = ctx.advance_model(&final_analysis, t_final)?;
    }
    Ok(records)
}

fn run_window(
    ctx: &mut RunContext,
    method: MethodKind,
    settings: &crate::assimilation::VariationalSettings,
    x_b: &StateVector,
    window_obs: &[ObservationSet],
    t0: i64,
) -> Result<WindowOutcome> {
    let window = window_obs.len();
    let pipe = ctx.pipe;
    let cycle_model = pipe.model.with_forcing(ctx.forcings.model_at(t0));

    match method {
        MethodKind::Hloba => {
            let mut spinup = false;
            let mut bz_ens_final = None;
            let mut rz_ens_final = None;
            // The closure cannot borrow ctx mutably while
            // hloba_sequential_window borrows other fields, so collect the
            // per-slot covariances up front is not possible (they depend on
            // the evolving background only through the obs mask). Slot
            // covariances depend on the archive and rng, not the background,
            // so precompute them.
            let mut slot_covs = Vec::with_capacity(window);
            for (slot, obs) in window_obs.iter().enumerate() {
                let covs = ctx.latent_covs(t0 + slot as i64, obs)?;
                spinup |= covs.spinup;
                if slot == window - 1 {
                    bz_ens_final = covs.bz_ens_raw.clone();
                    rz_ens_final = covs.rz_ens_raw.clone();
                }
                slot_covs.push(covs);
            }
            let (slot_records, result) = hloba_sequential_window(
                &pipe.ae,
                &pipe.o2l,
                &cycle_model,
                x_b,
                window_obs,
                |slot, _x_b, _obs| Ok((slot_covs[slot].bz.clone(), slot_covs[slot].rz.clone())),
            )?;
            Ok(WindowOutcome {
                analyses: slot_records.iter().map(|r| r.x_a.clone()).collect(),
                backgrounds: slot_records.iter().map(|r| r.x_b.clone()).collect(),
                iterations: 0,
                spinup,
                stalled: false,
                diagnosed_variance: result.model_variance,
                bz_ens_final,
                rz_ens_final,
            })
        }
        MethodKind::Hl3dvar => {
            let mut analyses = Vec::with_capacity(window);
            let mut backgrounds = Vec::with_capacity(window);
            let mut iterations = 0;
            let mut spinup = false;
            let mut stalled = false;
            let mut bz_ens_final = None;
            let mut rz_ens_final = None;
            let mut xb_slot = x_b.clone();
            for (slot, obs) in window_obs.iter().enumerate() {
                let covs = ctx.latent_covs(t0 + slot as i64, obs)?;
                spinup |= covs.spinup;
                if slot == window - 1 {
                    bz_ens_final = covs.bz_ens_raw.clone();
                    rz_ens_final = covs.rz_ens_raw.clone();
                }
                backgrounds.push(xb_slot.clone());
                let z_b = pipe.ae.encode(&xb_slot)?;
                let out = solve_l3dvar(&pipe.ae, &z_b, obs, &covs.bz, settings)?;
                iterations += out.diagnostics.iterations;
                stalled |= out.diagnostics.stalled;
                analyses.push(out.x_a.clone());
                if slot + 1 < window {
                    xb_slot = ctx.advance_model(&out.x_a, t0 + slot as i64)?;
                }
            }
            Ok(WindowOutcome {
                analyses,
                backgrounds,
                iterations,
                spinup,
                stalled,
                diagnosed_variance: None,
                bz_ens_final,
                rz_ens_final,
            })
        }
        MethodKind::H3dvar => {
            let mut analyses = Vec::with_capacity(window);
            let mut backgrounds = Vec::with_capacity(window);
            let mut iterations = 0;
            let mut spinup = false;
            let mut stalled = false;
            let mut xb_slot = x_b.clone();
            for (slot, obs) in window_obs.iter().enumerate() {
                let (b, spin) = ctx.model_b(t0 + slot as i64)?;
                spinup |= spin;
                backgrounds.push(xb_slot.clone());
                let out = solve_3dvar(&xb_slot, obs, &b, settings)?;
                iterations += out.diagnostics.iterations;
                stalled |= out.diagnostics.stalled;
                analyses.push(out.x_a.clone());
                if slot + 1 < window {
                    xb_slot = ctx.advance_model(&out.x_a, t0 + slot as i64)?;
                }
            }
            Ok(WindowOutcome {
                analyses,
                backgrounds,
                iterations,
                spinup,
                stalled,
                diagnosed_variance: None,
                bz_ens_final: None,
                rz_ens_final: None,
            })
        }
        MethodKind::H4dvar => {
            let (b, spinup) = ctx.model_b(t0)?;
            let out = solve_4dvar(x_b, window_obs, &cycle_model, &b, settings)?;
            let analyses = out.window_states.clone().expect("window solver returns states");
            let mut backgrounds = Vec::with_capacity(window);
            let mut bg = x_b.clone();
            for slot in 0..window {
                if slot > 0 {
                    bg = ctx.advance_model(&bg, t0 + slot as i64 - 1)?;
                }
                backgrounds.push(bg.clone());
            }
            Ok(WindowOutcome {
                analyses,
                backgrounds,
                iterations: out.diagnostics.iterations,
                spinup,
                stalled: out.diagnostics.stalled,
                diagnosed_variance: None,
                bz_ens_final: None,
                rz_ens_final: None,
            })
        }
        MethodKind::Hl4dvar => {
            let covs = ctx.latent_covs(t0, &window_obs[0])?;
            let z_b = pipe.ae.encode(x_b)?;
            let out =
                solve_l4dvar(&pipe.ae, &z_b, window_obs, &cycle_model, &covs.bz, settings)?;
            let analyses = out.window_states.clone().expect("window solver returns states");
            let mut backgrounds = Vec::with_capacity(window);
            let mut bg = x_b.clone();
            for slot in 0..window {
                if slot > 0 {
                    bg = ctx.advance_model(&bg, t0 + slot as i64 - 1)?;
                }
                backgrounds.push(bg.clone());
            }
            Ok(WindowOutcome {
                analyses,
                backgrounds,
                iterations: out.diagnostics.iterations,
                spinup: covs.spinup,
                stalled: out.diagnostics.stalled,
                diagnosed_variance: None,
                bz_ens_final: covs.bz_ens_raw,
                rz_ens_final: covs.rz_ens_raw,
            })
        }
    }
}

/// Forcing-regime experiment: run with a slow forcing schedule and compare
/// block means of the diagnosed uncertainty against block means of the
/// realized analysis error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub schedule: Vec<f64>,
    pub block_len: usize,
    pub block_mean_diag_std: Vec<f64>,
    pub block_mean_analysis_wrmse: Vec<f64>,
    /// Pearson correlation between the block means.
    pub correlation: f64,
    pub spinup_excluded: usize,
}

pub fn regime_drift_experiment(
    cfg: &Config,
    pipe: &Pipeline,
    forcing_schedule: &[f64],
    block_len: usize,
) -> Result<DriftReport> {
    if cfg.method.name != MethodKind::Hloba {
        return Err(Error::Config(
            "the regime-drift experiment diagnoses uncertainty and requires the hloba method"
                .into(),
        ));
    }
    if block_len == 0 {
        return Err(Error::Contract("block length must be >= 1".into()));
    }
    let records = run_cycling_experiment(cfg, pipe, Some(forcing_schedule))?;
    let spinup = cfg.experiment.spinup_cycles;
    let usable = &records[spinup.min(records.len())..];

    let mut block_mean_diag = Vec::new();
    let mut block_mean_err = Vec::new();
    for chunk in usable.chunks(block_len) {
        if chunk.len() < block_len {
            break;
        }
        let diag: f64 = chunk
            .iter()
            .map(|r| r.mean_diag_std.unwrap_or(f64::NAN))
            .sum::<f64>()
            / chunk.len() as f64;
        let err: f64 =
            chunk.iter().map(|r| r.analysis_wrmse).sum::<f64>() / chunk.len() as f64;
        block_mean_diag.push(diag);
        block_mean_err.push(err);
    }
    if block_mean_diag.len() < 3 {
        return Err(Error::InsufficientSamples(format!(
            "only {} full blocks; need at least 3 for a correlation",
            block_mean_diag.len()
        )));
    }
    let correlation =
        crate::harness::metrics::pearson(&block_mean_diag, &block_mean_err)?;
    Ok(DriftReport {
        schedule: forcing_schedule.to_vec(),
        block_len,
        block_mean_diag_std: block_mean_diag,
        block_mean_analysis_wrmse: block_mean_err,
        correlation,
        spinup_excluded: spinup,
    })
}
