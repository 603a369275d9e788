//! Cycling experiment harness: configuration, the preparation pipeline,
//! cycling runs, metrics, evaluation, tuning and result emission.

mod config;
mod cycling;
mod evaluate;
mod io;
mod metrics;
mod pipeline;
mod stats;
mod tune;

pub use config::{
    config_diff_paths, Config, CovarianceSection, ExperimentMode, ExperimentSection,
    LatentSection, MethodSection, ObservationsSection,
};
pub use cycling::{
    regime_drift_experiment, run_cycling_experiment, CycleRecord, DriftReport,
    LatentCycleDiagnostics,
};
pub use evaluate::{
    evaluate, summarize_runs, AggregatedCorrelation, DecorrelationReportSet, EvaluationReport,
    SummaryRow,
};
pub use io::{read_records_json, write_cycles_csv, write_records_json};
pub use metrics::{build_qc_thresholds, obs_rmse, pearson, rmse, weighted_rmse};
pub use pipeline::{
    attractor_state, bootstrap_nmc_pairs, build_pipeline, generate_climatology, perturb_state,
    with_solver_noise, NmcPairs, Pipeline, NOISE_LEVEL_FLOOR,
};
pub use stats::{mean_and_halfwidth, paired_bootstrap_prob_nonpositive};
pub use tune::{tune, TuningEntry, TuningGrid, TuningReport};

use crate::error::{Error, Result};

/// Run two configurations that must differ only at the declared paths
/// (plus, implicitly, nothing else): the harness refuses accidental
/// multi-factor ablations.
pub fn run_paired_ablation(
    base: &Config,
    variant: &Config,
    base_pipeline: &Pipeline,
    variant_pipeline: &Pipeline,
    allowed_paths: &[&str],
) -> Result<(Vec<CycleRecord>, Vec<CycleRecord>)> {
    let diff = config_diff_paths(base, variant)?;
    for path in &diff {
        if !allowed_paths.contains(&path.as_str()) {
            return Err(Error::Contract(format!(
                "paired ablation declared {allowed_paths:?} but configs also differ at {path}"
            )));
        }
    }
    let a = run_cycling_experiment(base, base_pipeline, None)?;
    let b = run_cycling_experiment(variant, variant_pipeline, None)?;
    Ok((a, b))
}
