//! Grid tuning of the hybrid weights and inflation on a short run, scored
//! by forecast error at the verification horizon. Tuned values are frozen
//! and reused; tuning runs must use a seed disjoint from evaluation runs.

use serde::{Deserialize, Serialize};

use crate::covariance::HybridWeights;
use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::harness::cycling::run_cycling_experiment;
use crate::harness::pipeline::Pipeline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub alpha_ens: Vec<f64>,
    pub beta_ens: Vec<f64>,
    pub inflation_b: Vec<f64>,
    pub inflation_r: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            alpha_ens: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            beta_ens: vec![0.0, 0.5, 1.0],
            inflation_b: vec![1.0, 1.1, 1.3],
            inflation_r: vec![1.0],
        }
    }
}

impl TuningGrid {
    pub fn points(&self) -> Vec<HybridWeights> {
        let mut out = Vec::new();
        for &a in &self.alpha_ens {
            for &b in &self.beta_ens {
                for &ib in &self.inflation_b {
                    for &ir in &self.inflation_r {
                        out.push(HybridWeights {
                            alpha_ens: a,
                            beta_ens: b,
                            inflation_b: ib,
                            inflation_r: ir,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningEntry {
    pub weights: HybridWeights,
    /// Mean forecast error at the verification horizon (tuning score).
    pub score: f64,
    pub mean_analysis_wrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub entries: Vec<TuningEntry>,
    pub selected: HybridWeights,
    pub tuning_cycles: usize,
    pub seed: u64,
}

/// Evaluate every grid point with a short cycling run and select the one
/// minimizing the mean forecast error at the horizon. Ties resolve to the
/// earliest grid point, so selection is deterministic.
pub fn tune(
    grid: &TuningGrid,
    base: &Config,
    pipeline: &Pipeline,
    tuning_cycles: usize,
) -> Result<TuningReport> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Contract("tuning grid is empty".into()));
    }
    if tuning_cycles <= base.experiment.spinup_cycles {
        return Err(Error::Contract(format!(
            "tuning needs more than {} cycles, got {tuning_cycles}",
            base.experiment.spinup_cycles
        )));
    }

    let mut entries = Vec::with_capacity(points.len());
    for w in &points {
        w.validate()?;
        let mut cfg = base.clone();
        cfg.experiment.cycles = tuning_cycles;
        cfg.experiment.tuning = true;
        cfg.covariance.alpha_ens = w.alpha_ens;
        cfg.covariance.beta_ens = w.beta_ens;
        cfg.covariance.inflation_b = w.inflation_b;
        cfg.covariance.inflation_r = w.inflation_r;
        let records = run_cycling_experiment(&cfg, pipeline, None)?;
        let usable = &records[base.experiment.spinup_cycles..];
        let horizon = usable[0].forecast_wrmse.len();
        let score = usable.iter().map(|r| r.forecast_wrmse[horizon - 1]).sum::<f64>()
            / usable.len() as f64;
        let mean_analysis =
            usable.iter().map(|r| r.analysis_wrmse).sum::<f64>() / usable.len() as f64;
        entries.push(TuningEntry { weights: *w, score, mean_analysis_wrmse: mean_analysis });
    }

    let selected = entries
        .iter()
        .min_by(|a, b| a.score.partial_cmp(&b.score).expect("scores are finite"))
        .expect("grid is non-empty")
        .weights;
    Ok(TuningReport { entries, selected, tuning_cycles, seed: base.experiment.seed })
}
