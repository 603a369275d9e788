//! Experiment configuration: a TOML file with `[model]`, `[latent]`,
//! `[observations]`, `[covariance]`, `[method]` and `[experiment]` sections.
//! Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::assimilation::{MethodKind, VariationalSettings};
use crate::dynamics::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::{AeVariant, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentSection {
    pub variant: AeVariant,
    pub n_z: usize,
    pub encoder_hidden: Vec<usize>,
    pub o2l_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub archive_size: usize,
    pub validation_fraction: f64,
}

impl Default for LatentSection {
    fn default() -> Self {
        LatentSection {
            variant: AeVariant::Mlp,
            n_z: 12,
            encoder_hidden: vec![64],
            o2l_hidden: vec![96, 96],
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-4,
            warmup_fraction: 0.05,
            archive_size: 20_000,
            validation_fraction: 0.1,
        }
    }
}

impl LatentSection {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            validation_fraction: self.validation_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationsSection {
    /// Observe every `spacing`-th grid point.
    pub spacing: usize,
    /// Observation noise as a fraction of the climatological standard
    /// deviation.
    pub noise_level: f64,
    pub withheld_fraction: f64,
    pub qc_enabled: bool,
    pub qc_lag_intervals: usize,
}

impl Default for ObservationsSection {
    fn default() -> Self {
        ObservationsSection {
            spacing: 3,
            noise_level: 0.03,
            withheld_fraction: 0.0,
            qc_enabled: false,
            qc_lag_intervals: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceSection {
    pub ensemble_size: usize,
    pub alpha_ens: f64,
    pub beta_ens: f64,
    pub inflation_b: f64,
    pub inflation_r: f64,
    /// Latent variance floor, relative to the mean climatological latent
    /// variance.
    pub variance_floor_rel: f64,
    /// Gaspari-Cohn radius (grid points) for the ensemble model-space
    /// covariance; the climatological one is left untapered.
    pub localization_radius: f64,
    /// Length of the bootstrap assimilation run (in DA intervals) that
    /// generates the lagged forecast pairs for the climatological estimates.
    pub nmc_bootstrap_intervals: usize,
    /// Use the centered variant of the flow-dependent observation
    /// covariance (sensitivity studies only).
    pub rz_ens_centered: bool,
}

impl Default for CovarianceSection {
    fn default() -> Self {
        CovarianceSection {
            ensemble_size: 3,
            alpha_ens: 0.25,
            beta_ens: 1.0,
            inflation_b: 1.0,
            inflation_r: 1.0,
            variance_floor_rel: 1e-8,
            localization_radius: 4.0,
            nmc_bootstrap_intervals: 600,
            rz_ens_centered: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub name: MethodKind,
    pub window_slots: usize,
    pub adam_lr_latent: f64,
    pub adam_lr_model: f64,
    pub adam_max_iters: usize,
    pub lbfgs_tol: f64,
    pub lbfgs_max_iters: usize,
}

impl Default for MethodSection {
    fn default() -> Self {
        let v = VariationalSettings::default();
        MethodSection {
            name: MethodKind::Hloba,
            window_slots: 4,
            adam_lr_latent: v.adam_lr_latent,
            adam_lr_model: v.adam_lr_model,
            adam_max_iters: v.adam_max_iters,
            lbfgs_tol: v.lbfgs_tol,
            lbfgs_max_iters: v.lbfgs_max_iters,
        }
    }
}

impl MethodSection {
    pub fn variational_settings(&self) -> VariationalSettings {
        VariationalSettings {
            adam_lr_latent: self.adam_lr_latent,
            adam_lr_model: self.adam_lr_model,
            adam_max_iters: self.adam_max_iters,
            lbfgs_tol: self.lbfgs_tol,
            lbfgs_max_iters: self.lbfgs_max_iters,
            ..VariationalSettings::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    /// Truth and assimilating model share the same dynamics; verification
    /// is against the known truth.
    IdealizedTwin,
    /// The truth run uses a different forcing and verification uses withheld
    /// observations.
    ImperfectReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub mode: ExperimentMode,
    pub cycles: usize,
    pub verification_horizon: usize,
    pub seed: u64,
    pub spinup_cycles: usize,
    /// Forcing of the truth run in imperfect-reference mode.
    pub truth_forcing: f64,
    /// Marks a tuning run; tuning must use a seed/segment disjoint from
    /// evaluation runs.
    pub tuning: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            mode: ExperimentMode::IdealizedTwin,
            cycles: 1000,
            verification_horizon: 20,
            seed: 7,
            spinup_cycles: 20,
            truth_forcing: 8.2,
            tuning: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub latent: LatentSection,
    pub observations: ObservationsSection,
    pub covariance: CovarianceSection,
    pub method: MethodSection,
    pub experiment: ExperimentSection,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.latent.n_z == 0 || self.latent.n_z > self.model.n_x {
            return Err(Error::Config(format!(
                "n_z must be in [1, {}], got {}",
                self.model.n_x, self.latent.n_z
            )));
        }
        if self.observations.spacing == 0 {
            return Err(Error::Config("observation spacing must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.observations.withheld_fraction) {
            return Err(Error::Config("withheld_fraction must be in [0, 1)".into()));
        }
        if self.covariance.ensemble_size < 2 {
            return Err(Error::Config("ensemble_size must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.covariance.alpha_ens)
            || !(0.0..=1.0).contains(&self.covariance.beta_ens)
        {
            return Err(Error::Config("blend weights must be in [0, 1]".into()));
        }
        if !(self.covariance.inflation_b > 0.0) || !(self.covariance.inflation_r > 0.0) {
            return Err(Error::Config("inflation factors must be positive".into()));
        }
        if self.method.window_slots == 0 {
            return Err(Error::Config("window_slots must be >= 1".into()));
        }
        if self.experiment.cycles == 0 {
            return Err(Error::Config("cycles must be >= 1".into()));
        }
        if self.experiment.verification_horizon == 0 {
            return Err(Error::Config("verification_horizon must be >= 1".into()));
        }
        Ok(())
    }
}

/// Paths (dotted) at which two configs differ, for paired-ablation checks.
pub fn config_diff_paths(a: &Config, b: &Config) -> Result<Vec<String>> {
    let va = serde_json::to_value(a)?;
    let vb = serde_json::to_value(b)?;
    let mut out = Vec::new();
    diff_value("", &va, &vb, &mut out);
    Ok(out)
}

fn diff_value(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            for (k, va) in ma {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match mb.get(k) {
                    Some(vb) => diff_value(&path, va, vb, out),
                    None => out.push(path),
                }
            }
            for k in mb.keys() {
                if !ma.contains_key(k) {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    out.push(path);
                }
            }
        }
        _ => {
            if a != b {
                out.push(prefix.to_string());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn roundtrip_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml_string().unwrap();
        let back = Config::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
[model]
n_x = 40
forcing = 8.0
dt = 0.05
steps_per_da_interval = 2
not_a_field = 3
"#;
        assert!(Config::from_toml_str(text).is_err());

        let text = r#"
[nonexistent_section]
x = 1
"#;
        assert!(Config::from_toml_str(text).is_err());
    }

    #[test]
    fn partial_configs_get_defaults() {
        let text = r#"
[method]
name = "hl3dvar"

[experiment]
cycles = 50
"#;
        let cfg = Config::from_toml_str(text).unwrap();
        assert_eq!(cfg.method.name, MethodKind::Hl3dvar);
        assert_eq!(cfg.experiment.cycles, 50);
        assert_eq!(cfg.model.n_x, 40);
    }

    #[test]
    fn diff_paths_finds_the_changed_field() {
        let a = Config::default();
        let mut b = a.clone();
        b.covariance.beta_ens = 0.0;
        b.experiment.seed = 9;
        let mut diff = config_diff_paths(&a, &b).unwrap();
        diff.sort();
        assert_eq!(diff, vec!["covariance.beta_ens", "experiment.seed"]);
    }
}
