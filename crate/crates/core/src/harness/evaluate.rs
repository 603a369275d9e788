//! Aggregation of cycle records into an evaluation report: mean errors,
//! uncertainty-error correlations at several averaging windows, latent
//! calibration correlations and the decorrelation diagnostic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::covariance::{latent_decorrelation_report, DecorrelationSummary};
use crate::error::{Error, Result};
use crate::harness::cycling::CycleRecord;
use crate::harness::metrics::pearson;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatedCorrelation {
    /// Averaging window in cycles.
    pub window: usize,
    /// Mean spatial correlation between window-averaged diagnosed standard
    /// deviation and window-averaged absolute error; absent when the method
    /// does not diagnose uncertainty.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DecorrelationReportSet {
    pub latent_background: Option<DecorrelationSummary>,
    pub latent_observation: Option<DecorrelationSummary>,
    pub model_background: Option<DecorrelationSummary>,
    pub model_observation: Option<DecorrelationSummary>,
}

/// Per-method summary row used in comparison and ablation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mean_analysis_wrmse: f64,
    pub mean_forecast_wrmse_at_horizon: f64,
    pub cycles: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cycles_total: usize,
    pub spinup_excluded: usize,
    pub mean_analysis_wrmse: f64,
    pub mean_slot_analysis_wrmse: Vec<f64>,
    pub mean_forecast_wrmse_by_lead: Vec<f64>,
    pub forecast_wrmse_at_horizon: f64,
    pub mean_ooa_wrmse: f64,
    pub mean_obs_rmse_withheld: Option<f64>,
    pub mean_solver_iterations: f64,
    /// Uncertainty-error correlation per aggregation window.
    pub rho_x: Vec<AggregatedCorrelation>,
    pub rho_zb_clim: Option<f64>,
    pub rho_zb_ens: Option<f64>,
    pub rho_zo_clim: Option<f64>,
    pub rho_zo_ens: Option<f64>,
    pub decorrelation: DecorrelationReportSet,
    pub flag_counts: BTreeMap<String, usize>,
    /// Optional cross-run table attached by ablation drivers.
    pub ablation: Option<Vec<SummaryRow>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        if v.is_finite() {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

fn mean_vectors(vectors: impl Iterator<Item = Vec<f64>> + Clone, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    let mut count = 0usize;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x;
        }
        count += 1;
    }
    if count > 0 {
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
    }
    acc
}

/// Spatial uncertainty-error correlation at one averaging window:
/// block-average the per-point diagnosed std and absolute error over
/// `window` consecutive cycles, correlate each block across grid points, and
/// average over blocks.
fn rho_x_at_window(records: &[&CycleRecord], window: usize) -> Option<f64> {
    let with_diag: Vec<&&CycleRecord> =
        records.iter().filter(|r| r.diagnosed_std.is_some()).collect();
    if with_diag.len() < window {
        return None;
    }
    let n_x = with_diag[0].abs_analysis_error.len();
    let mut correlations = Vec::new();
    for chunk in with_diag.chunks(window) {
        if chunk.len() < window {
            break;
        }
        let mean_err = mean_vectors(chunk.iter().map(|r| r.abs_analysis_error.clone()), n_x);
        let mean_std = mean_vectors(
            chunk.iter().map(|r| r.diagnosed_std.clone().expect("filtered above")),
            n_x,
        );
        if let Ok(r) = pearson(&mean_std, &mean_err) {
            correlations.push(r);
        }
    }
    mean(correlations.into_iter())
}

/// Mean per-cycle correlation across latent dimensions between realized
/// squared errors and an estimated variance vector.
fn latent_calibration<FErr, FVar>(
    records: &[&CycleRecord],
    err: FErr,
    var: FVar,
) -> Option<f64>
where
    FErr: Fn(&CycleRecord) -> Option<Vec<f64>>,
    FVar: Fn(&CycleRecord) -> Option<Vec<f64>>,
{
    let mut correlations = Vec::new();
    for r in records {
        let (Some(e), Some(v)) = (err(r), var(r)) else { continue };
        let sq: Vec<f64> = e.iter().map(|x| x * x).collect();
        if let Ok(rho) = pearson(&sq, &v) {
            correlations.push(rho);
        }
    }
    mean(correlations.into_iter())
}

/// Build the report from a completed run. `aggregation_windows` are in
/// cycles; each must fit within the post-spin-up record count.
pub fn evaluate(
    records: &[CycleRecord],
    aggregation_windows: &[usize],
    spinup: usize,
) -> Result<EvaluationReport> {
    if records.is_empty() {
        return Err(Error::Contract("no records to evaluate".into()));
    }
    if spinup >= records.len() {
        return Err(Error::Contract(format!(
            "spin-up of {spinup} cycles leaves nothing from {} records",
            records.len()
        )));
    }
    let usable: Vec<&CycleRecord> = records[spinup..].iter().collect();
    for &w in aggregation_windows {
        if w == 0 || w > usable.len() {
            return Err(Error::Contract(format!(
                "aggregation window {w} does not fit in {} post-spin-up cycles",
                usable.len()
            )));
        }
    }

    let horizon = usable[0].forecast_wrmse.len();
    let mean_forecast_by_lead: Vec<f64> = (0..horizon)
        .map(|lead| {
            mean(usable.iter().map(|r| r.forecast_wrmse[lead])).unwrap_or(f64::NAN)
        })
        .collect();
    let n_slots = usable[0].slot_analysis_wrmse.len();
    let mean_slot: Vec<f64> = (0..n_slots)
        .map(|s| mean(usable.iter().map(|r| r.slot_analysis_wrmse[s])).unwrap_or(f64::NAN))
        .collect();

    let rho_x = aggregation_windows
        .iter()
        .map(|&w| AggregatedCorrelation { window: w, rho: rho_x_at_window(&usable, w) })
        .collect();

    let rho_zb_clim = latent_calibration(
        &usable,
        |r| r.latent.as_ref().map(|l| l.zb_error.clone()),
        |r| r.latent.as_ref().map(|l| l.bz_clim.clone()),
    );
    let rho_zb_ens = latent_calibration(
        &usable,
        |r| r.latent.as_ref().map(|l| l.zb_error.clone()),
        |r| r.latent.as_ref().and_then(|l| l.bz_ens.clone()),
    );
    let rho_zo_clim = latent_calibration(
        &usable,
        |r| r.latent.as_ref().map(|l| l.zo_error.clone()),
        |r| r.latent.as_ref().map(|l| l.rz_clim.clone()),
    );
    let rho_zo_ens = latent_calibration(
        &usable,
        |r| r.latent.as_ref().map(|l| l.zo_error.clone()),
        |r| r.latent.as_ref().and_then(|l| l.rz_ens.clone()),
    );

    let decorr_of = |samples: Vec<Vec<f64>>| -> Option<DecorrelationSummary> {
        latent_decorrelation_report(&samples).ok()
    };
    let decorrelation = DecorrelationReportSet {
        latent_background: decorr_of(
            usable.iter().filter_map(|r| r.latent.as_ref().map(|l| l.zb_error.clone())).collect(),
        ),
        latent_observation: decorr_of(
            usable.iter().filter_map(|r| r.latent.as_ref().map(|l| l.zo_error.clone())).collect(),
        ),
        model_background: decorr_of(usable.iter().map(|r| r.background_error.clone()).collect()),
        model_observation: decorr_of(usable.iter().map(|r| r.ooa_error.clone()).collect()),
    };

    let mut flag_counts = BTreeMap::new();
    for r in &usable {
        for f in &r.flags {
            *flag_counts.entry(f.clone()).or_insert(0usize) += 1;
        }
    }

    Ok(EvaluationReport {
        cycles_total: records.len(),
        spinup_excluded: spinup,
        mean_analysis_wrmse: mean(usable.iter().map(|r| r.analysis_wrmse))
            .ok_or_else(|| Error::UndefinedMetric("no finite analysis errors".into()))?,
        mean_slot_analysis_wrmse: mean_slot,
        forecast_wrmse_at_horizon: *mean_forecast_by_lead.last().unwrap_or(&f64::NAN),
        mean_forecast_wrmse_by_lead: mean_forecast_by_lead,
        mean_ooa_wrmse: mean(usable.iter().map(|r| r.ooa_wrmse)).unwrap_or(f64::NAN),
        mean_obs_rmse_withheld: mean(
            usable.iter().filter_map(|r| r.obs_rmse_withheld),
        ),
        mean_solver_iterations: mean(usable.iter().map(|r| r.solver_iterations as f64))
            .unwrap_or(0.0),
        rho_x,
        rho_zb_clim,
        rho_zb_ens,
        rho_zo_clim,
        rho_zo_ens,
        decorrelation,
        flag_counts,
        ablation: None,
    })
}

/// Summary rows for a set of labelled runs (comparison/ablation tables).
pub fn summarize_runs(runs: &[(String, &[CycleRecord])], spinup: usize) -> Result<Vec<SummaryRow>> {
    runs.iter()
        .map(|(label, records)| {
            if spinup >= records.len() {
                return Err(Error::Contract(format!(
                    "spin-up of {spinup} cycles leaves nothing for run {label:?}"
                )));
            }
            let usable = &records[spinup..];
            let horizon = usable[0].forecast_wrmse.len();
            Ok(SummaryRow {
                label: label.clone(),
                mean_analysis_wrmse: usable.iter().map(|r| r.analysis_wrmse).sum::<f64>()
                    / usable.len() as f64,
                mean_forecast_wrmse_at_horizon: usable
                    .iter()
                    .map(|r| r.forecast_wrmse[horizon - 1])
                    .sum::<f64>()
                    / usable.len() as f64,
                cycles: usable.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_record(cycle: usize, err_pattern: Vec<f64>, std_pattern: Vec<f64>) -> CycleRecord {
        let n = err_pattern.len();
        CycleRecord {
            cycle,
            analysis_wrmse: (err_pattern.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt(),
            slot_analysis_wrmse: vec![0.1; 4],
            forecast_wrmse: vec![0.2; 5],
            mean_diag_std: Some(std_pattern.iter().sum::<f64>() / n as f64),
            diagnosed_std: Some(std_pattern),
            abs_analysis_error: err_pattern.clone(),
            background_error: err_pattern.clone(),
            ooa_error: err_pattern,
            ooa_wrmse: 0.3,
            obs_rmse_withheld: None,
            solver_iterations: 10,
            flags: vec![],
            latent: None,
        }
    }

    #[test]
    fn perfect_uncertainty_gives_unit_correlation_at_every_window() {
        // Diagnosed std identical to |error| per grid point, with patterns
        // varying across cycles.
        let records: Vec<CycleRecord> = (0..40)
            .map(|c| {
                let pattern: Vec<f64> =
                    (0..8).map(|i| 0.1 + ((c + i) % 5) as f64 * 0.05).collect();
                synthetic_record(c, pattern.clone(), pattern)
            })
            .collect();
        let report = evaluate(&records, &[1, 5, 10], 0).unwrap();
        for agg in &report.rho_x {
            let rho = agg.rho.unwrap();
            assert!((rho - 1.0).abs() < 1e-12, "window {}: rho {rho}", agg.window);
        }
    }

    #[test]
    fn window_one_is_per_step_correlation() {
        let records: Vec<CycleRecord> = (0..10)
            .map(|c| {
                let err: Vec<f64> = (0..6).map(|i| (i as f64 + 1.0) * 0.1).collect();
                // Std reversed: perfectly anti-correlated each step.
                let std: Vec<f64> = err.iter().rev().copied().collect();
                synthetic_record(c, err, std)
            })
            .collect();
        let report = evaluate(&records, &[1], 0).unwrap();
        assert!((report.rho_x[0].rho.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_longer_than_run_is_rejected() {
        let records: Vec<CycleRecord> =
            (0..5).map(|c| synthetic_record(c, vec![0.1; 4], vec![0.1; 4])).collect();
        assert!(evaluate(&records, &[10], 0).is_err());
        assert!(evaluate(&records, &[1], 5).is_err());
    }

    #[test]
    fn spinup_is_excluded_from_aggregates() {
        let mut records: Vec<CycleRecord> =
            (0..10).map(|c| synthetic_record(c, vec![10.0; 4], vec![0.1; 4])).collect();
        for r in records.iter_mut().skip(5) {
            r.analysis_wrmse = 1.0;
        }
        let report = evaluate(&records, &[1], 5).unwrap();
        assert!((report.mean_analysis_wrmse - 1.0).abs() < 1e-12);
        assert_eq!(report.spinup_excluded, 5);
    }
}
