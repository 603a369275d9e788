//! Climatological, ensemble and hybrid estimation of the latent background
//! and observation error covariances (diagonal), the model-space background
//! covariance for the model-space baselines (full, localized), time-lagged
//! ensemble assembly, and the latent error-decorrelation diagnostic.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{forecast_state, ModelConfig, StateVector};
use crate::error::{Error, Result};
use crate::latent::{AutoencoderModel, LatentVector, O2LModel, QualityMask};
use crate::observations::{apply_h, ObservationNetwork};

/// Per-dimension variances standing in for a diagonal covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCovariance {
    variances: Vec<f64>,
}

impl DiagonalCovariance {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if variances.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Contract("variances must be finite and non-negative".into()));
        }
        Ok(DiagonalCovariance { variances })
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn std_devs(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.sqrt()).collect()
    }
}

/// Multiplicative inflation: every variance scaled by `factor`.
pub fn inflate(cov: &DiagonalCovariance, factor: f64) -> Result<DiagonalCovariance> {
    if !(factor > 0.0) {
        return Err(Error::Contract(format!("inflation factor must be positive, got {factor}")));
    }
    DiagonalCovariance::new(cov.variances.iter().map(|v| v * factor).collect())
}

/// Elementwise floor: every variance at least `min_var`.
pub fn floor(cov: &DiagonalCovariance, min_var: f64) -> Result<DiagonalCovariance> {
    if !(min_var > 0.0) {
        return Err(Error::Contract(format!("variance floor must be positive, got {min_var}")));
    }
    DiagonalCovariance::new(cov.variances.iter().map(|v| v.max(min_var)).collect())
}

/// Convex blend `weight * ens + (1 - weight) * clim`, per dimension.
pub fn hybrid_blend(
    clim: &DiagonalCovariance,
    ens: &DiagonalCovariance,
    weight: f64,
) -> Result<DiagonalCovariance> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Contract(format!("blend weight must be in [0, 1], got {weight}")));
    }
    if clim.len() != ens.len() {
        return Err(Error::Contract(format!(
            "blend length mismatch: {} vs {}",
            clim.len(),
            ens.len()
        )));
    }
    DiagonalCovariance::new(
        clim.variances
            .iter()
            .zip(&ens.variances)
            .map(|(c, e)| weight * e + (1.0 - weight) * c)
            .collect(),
    )
}

/// Hybrid blending weights and inflation factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridWeights {
    /// Weight on the ensemble component of the background covariance.
    pub alpha_ens: f64,
    /// Weight on the ensemble component of the observation covariance.
    pub beta_ens: f64,
    pub inflation_b: f64,
    pub inflation_r: f64,
}

impl HybridWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_ens) || !(0.0..=1.0).contains(&self.beta_ens) {
            return Err(Error::Config("blend weights must be in [0, 1]".into()));
        }
        if !(self.inflation_b > 0.0) || !(self.inflation_r > 0.0) {
            return Err(Error::Config("inflation factors must be positive".into()));
        }
        Ok(())
    }
}

impl Default for HybridWeights {
    fn default() -> Self {
        HybridWeights { alpha_ens: 0.5, beta_ens: 1.0, inflation_b: 1.0, inflation_r: 1.0 }
    }
}

/// Climatological latent background covariance via lagged forecast pairs:
/// half the mean squared encoded difference between the long- and short-lead
/// forecasts valid at the same time, per latent dimension.
pub fn nmc_latent_b(
    encoder: &AutoencoderModel,
    forecast_pairs: &[(StateVector, StateVector)],
) -> Result<DiagonalCovariance> {
    if forecast_pairs.len() < 10 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 10 forecast pairs, got {}",
            forecast_pairs.len()
        )));
    }
    let n_z = encoder.n_z;
    let mut acc = vec![0.0; n_z];
    for (short, long) in forecast_pairs {
        let zs = encoder.encode(short)?;
        let zl = encoder.encode(long)?;
        for (a, (s, l)) in acc.iter_mut().zip(zs.values().iter().zip(zl.values())) {
            *a += (l - s).powi(2);
        }
    }
    let n = forecast_pairs.len() as f64;
    DiagonalCovariance::new(acc.into_iter().map(|v| 0.5 * v / n).collect())
}

/// Unbiased per-dimension sample variance of encoded ensemble members about
/// their mean.
pub fn ensemble_cov_diag(encoded_members: &[LatentVector]) -> Result<DiagonalCovariance> {
    let n_e = encoded_members.len();
    if n_e < 2 {
        return Err(Error::Contract(format!(
            "ensemble covariance needs at least 2 members, got {n_e}"
        )));
    }
    let n_z = encoded_members[0].len();
    let mut mean = vec![0.0; n_z];
    for m in encoded_members {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n_e as f64;
    }
    let mut var = vec![0.0; n_z];
    for m in encoded_members {
        for (i, v) in m.values().iter().enumerate() {
            var[i] += (v - mean[i]).powi(2);
        }
    }
    DiagonalCovariance::new(var.into_iter().map(|v| v / (n_e - 1) as f64).collect())
}

/// Climatological latent observation covariance: half the mean squared
/// discrepancy between the observation-to-latent map of simulated noisy
/// observations and the encoder, over a large archive. The mask is 1 on the
/// network.
pub fn clim_latent_r<R: Rng + ?Sized>(
    o2l: &O2LModel,
    encoder: &AutoencoderModel,
    archive_states: &[StateVector],
    network: &ObservationNetwork,
    rng: &mut R,
) -> Result<DiagonalCovariance> {
    if archive_states.len() < 500 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 500 archive states, got {}",
            archive_states.len()
        )));
    }
    let mut acc = vec![0.0; encoder.n_z];
    for state in archive_states {
        let d = o2l_discrepancy(o2l, encoder, state, network, None, rng)?;
        for (a, v) in acc.iter_mut().zip(&d) {
            *a += v * v;
        }
    }
    let n = archive_states.len() as f64;
    DiagonalCovariance::new(acc.into_iter().map(|v| 0.5 * v / n).collect())
}

/// How the flow-dependent observation covariance treats the member
/// discrepancies: as printed it is an uncentered sum; the centered variant
/// subtracts the member mean first and is provided for sensitivity studies
/// only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleRMode {
    Uncentered,
    Centered,
}

/// Flow-dependent latent observation covariance from an ensemble: per-member
/// discrepancy between the observation-to-latent map (on simulated noisy
/// observations of the member, with the current mask) and the encoder,
/// squared and summed with a `1/(N_e - 1)` prefactor.
pub fn ensemble_latent_r<R: Rng + ?Sized>(
    o2l: &O2LModel,
    encoder: &AutoencoderModel,
    members: &EnsembleSet,
    network: &ObservationNetwork,
    mask: &QualityMask,
    mode: EnsembleRMode,
    rng: &mut R,
) -> Result<DiagonalCovariance> {
    let n_e = members.members.len();
    if n_e < 2 {
        return Err(Error::Contract(format!(
            "ensemble observation covariance needs at least 2 members, got {n_e}"
        )));
    }
    let mut discrepancies = Vec::with_capacity(n_e);
    for member in &members.members {
        discrepancies.push(o2l_discrepancy(o2l, encoder, member, network, Some(mask), rng)?);
    }
    let n_z = encoder.n_z;
    let mut acc = vec![0.0; n_z];
    match mode {
        EnsembleRMode::Uncentered => {
            for d in &discrepancies {
                for (a, v) in acc.iter_mut().zip(d) {
                    *a += v * v;
                }
            }
        }
        EnsembleRMode::Centered => {
            let mut mean = vec![0.0; n_z];
            for d in &discrepancies {
                for (m, v) in mean.iter_mut().zip(d) {
                    *m += v / n_e as f64;
                }
            }
            for d in &discrepancies {
                for (i, v) in d.iter().enumerate() {
                    acc[i] += (v - mean[i]).powi(2);
                }
            }
        }
    }
    DiagonalCovariance::new(acc.into_iter().map(|v| v / (n_e - 1) as f64).collect())
}

/// Latent discrepancy `O2L(H(x) + eps, m) - E(x)` for one state. With a mask,
/// noise follows the training convention `sigma / m` per observed point and
/// masked-out points are dropped; without one, the mask is 1 on the network.
fn o2l_discrepancy<R: Rng + ?Sized>(
    o2l: &O2LModel,
    encoder: &AutoencoderModel,
    state: &StateVector,
    network: &ObservationNetwork,
    mask: Option<&QualityMask>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n_x = encoder.n_x;
    let clean = apply_h(state, network)?;
    let mut image = vec![0.0; n_x];
    let mut mask_image = vec![0.0; n_x];
    for (pos, &idx) in network.observed_indices().iter().enumerate() {
        let quality = mask.map_or(1.0, |m| m.values()[idx]);
        if quality == 0.0 {
            continue;
        }
        let sigma = network.noise_std()[pos] / quality;
        let noisy = if sigma > 0.0 {
            let dist = Normal::new(0.0, sigma)
                .map_err(|e| Error::Config(format!("bad noise std: {e}")))?;
            clean[pos] + dist.sample(rng)
        } else {
            clean[pos]
        };
        image[idx] = (noisy - o2l.normalization.mean[idx]) / o2l.normalization.scale[idx];
        mask_image[idx] = quality;
    }
    let mut input = image;
    input.extend_from_slice(&mask_image);
    let mapped = crate::latent::forward_layers(&o2l.layers, &input)?;
    let target = encoder.encode(state)?;
    Ok(mapped.iter().zip(target.values()).map(|(a, b)| a - b).collect())
}

/// Ensemble of states valid at one time, tagged with their forecast lead
/// times in DA intervals.
#[derive(Debug, Clone)]
pub struct EnsembleSet {
    pub members: Vec<StateVector>,
    pub lead_times: Vec<i64>,
    pub valid_time: i64,
}

impl EnsembleSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Build a time-lagged ensemble at `valid_time`: member `k` is the archived
/// analysis from `k` intervals ago advanced `k` intervals by `advance`.
/// Falls back to however many members the archive supports; fewer than two
/// signals spin-up.
pub fn assemble_time_lagged_ensemble<F>(
    archive: &BTreeMap<i64, StateVector>,
    valid_time: i64,
    size: usize,
    mut advance: F,
) -> Result<EnsembleSet>
where
    F: FnMut(&StateVector, i64) -> Result<StateVector>,
{
    let mut members = Vec::new();
    let mut lead_times = Vec::new();
    for k in 1..=size as i64 {
        let origin = valid_time - k;
        let Some(analysis) = archive.get(&origin) else { break };
        let mut state = analysis.clone();
        for step in 0..k {
            state = advance(&state, origin + step)?;
        }
        members.push(state);
        lead_times.push(k);
    }
    if members.len() < 2 {
        return Err(Error::SpinUp(format!(
            "only {} archived analyses available before time {valid_time}",
            members.len()
        )));
    }
    Ok(EnsembleSet { members, lead_times, valid_time })
}

/// Convenience wrapper advancing members with a fixed model configuration.
pub fn assemble_time_lagged_ensemble_fixed(
    archive: &BTreeMap<i64, StateVector>,
    config: &ModelConfig,
    valid_time: i64,
    size: usize,
) -> Result<EnsembleSet> {
    assemble_time_lagged_ensemble(archive, valid_time, size, |state, _t| {
        forecast_state(state, config.steps_per_da_interval, config)
    })
}

/// Full symmetric model-space covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FullCovariance {
    matrix: DMatrix<f64>,
}

impl FullCovariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Contract("covariance matrix must be square".into()));
        }
        let n = matrix.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Estimation(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(FullCovariance { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn min_max_eigenvalues(&self) -> (f64, f64) {
        let eig = self.matrix.clone().symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }

    /// Convex blend of two full covariances.
    pub fn blend(&self, ens: &FullCovariance, weight: f64) -> Result<FullCovariance> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Contract(format!("blend weight must be in [0, 1], got {weight}")));
        }
        if self.dim() != ens.dim() {
            return Err(Error::Contract("blend dimension mismatch".into()));
        }
        FullCovariance::new(&self.matrix * (1.0 - weight) + &ens.matrix * weight)
    }
}

/// Compactly supported taper, 1 at distance 0 and exactly 0 at
/// `distance >= radius`.
pub fn gaspari_cohn(distance: f64, radius: f64) -> f64 {
    if distance < 0.0 {
        return gaspari_cohn(-distance, radius);
    }
    if radius == 0.0 {
        return if distance == 0.0 { 1.0 } else { 0.0 };
    }
    if radius.is_infinite() {
        return 1.0;
    }
    // Support scale: the polynomial support of half-width c covers [0, 2c].
    let c = radius / 2.0;
    let z = distance / c;
    if z >= 2.0 {
        0.0
    } else if z <= 1.0 {
        ((((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z * z + 1.0).max(0.0)
    } else {
        (((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0 - 2.0 / (3.0 * z))
            .max(0.0)
    }
}

/// Cyclic grid distance between indices.
pub fn cyclic_distance(i: usize, j: usize, n: usize) -> f64 {
    let d = (i as i64 - j as i64).unsigned_abs() as usize;
    d.min(n - d) as f64
}

fn localize_and_regularize(mut cov: DMatrix<f64>, radius: f64) -> Result<FullCovariance> {
    let n = cov.nrows();
    for i in 0..n {
        for j in 0..n {
            cov[(i, j)] *= gaspari_cohn(cyclic_distance(i, j, n), radius);
        }
    }
    // Sample covariances tapered by a correlation function stay positive
    // semidefinite up to rounding; a small ridge makes them safely SPD.
    let eig = cov.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * max.max(f64::EPSILON) {
        return Err(Error::Estimation(format!(
            "tapered covariance has eigenvalue {min:.3e} far below zero"
        )));
    }
    let ridge = 1e-8 * max.max(1e-12) + 2.0 * (-min).max(0.0);
    for i in 0..n {
        cov[(i, i)] += ridge;
    }
    FullCovariance::new(cov)
}

/// Model-space climatological background covariance from lagged forecast
/// pairs, with a Gaspari-Cohn taper of the given radius (grid points) and a
/// ridge to guarantee SPD.
pub fn nmc_model_b(
    forecast_pairs: &[(StateVector, StateVector)],
    localization_radius: f64,
) -> Result<FullCovariance> {
    if forecast_pairs.len() < 10 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 10 forecast pairs, got {}",
            forecast_pairs.len()
        )));
    }
    let n = forecast_pairs[0].0.len();
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for (short, long) in forecast_pairs {
        let d: Vec<f64> =
            long.values().iter().zip(short.values()).map(|(l, s)| l - s).collect();
        for i in 0..n {
            for j in i..n {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    let scale = 0.5 / forecast_pairs.len() as f64;
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] * scale;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    localize_and_regularize(cov, localization_radius)
}

/// Model-space ensemble background covariance (centered, unbiased), tapered
/// and regularized like [`nmc_model_b`].
pub fn ensemble_model_b(
    members: &EnsembleSet,
    localization_radius: f64,
) -> Result<FullCovariance> {
    let n_e = members.members.len();
    if n_e < 2 {
        return Err(Error::Contract(format!(
            "ensemble covariance needs at least 2 members, got {n_e}"
        )));
    }
    let n = members.members[0].len();
    let mut mean = vec![0.0; n];
    for m in &members.members {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v / n_e as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for m in &members.members {
        let d: Vec<f64> = m.values().iter().zip(&mean).map(|(v, mu)| v - mu).collect();
        for i in 0..n {
            for j in i..n {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    let scale = 1.0 / (n_e - 1) as f64;
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] * scale;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    localize_and_regularize(cov, localization_radius)
}

/// Mean absolute off-diagonal correlation across dimensions of error samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecorrelationSummary {
    pub n_samples: usize,
    pub n_dims: usize,
    pub mean_abs_offdiag_corr: f64,
}

/// Inter-dimension decorrelation diagnostic: Pearson correlations between
/// every pair of dimensions over the samples, averaged in absolute value
/// over the off-diagonal pairs.
pub fn latent_decorrelation_report(error_samples: &[Vec<f64>]) -> Result<DecorrelationSummary> {
    let n_samples = error_samples.len();
    if n_samples < 100 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 100 error samples, got {n_samples}"
        )));
    }
    let n_dims = error_samples[0].len();
    if error_samples.iter().any(|s| s.len() != n_dims) {
        return Err(Error::Contract("error samples have inconsistent dimension".into()));
    }
    let mut mean = vec![0.0; n_dims];
    for s in error_samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n_samples as f64;
        }
    }
    let mut centered: Vec<Vec<f64>> = Vec::with_capacity(n_samples);
    for s in error_samples {
        centered.push(s.iter().zip(&mean).map(|(v, m)| v - m).collect());
    }
    let std: Vec<f64> = (0..n_dims)
        .map(|i| {
            (centered.iter().map(|s| s[i] * s[i]).sum::<f64>() / (n_samples - 1) as f64).sqrt()
        })
        .collect();

    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n_dims {
        for j in (i + 1)..n_dims {
            let cov =
                centered.iter().map(|s| s[i] * s[j]).sum::<f64>() / (n_samples - 1) as f64;
            let denom = std[i] * std[j];
            let corr = if denom > 0.0 { cov / denom } else { 0.0 };
            total += corr.abs();
            count += 1;
        }
    }
    Ok(DecorrelationSummary {
        n_samples,
        n_dims,
        mean_abs_offdiag_corr: if count > 0 { total / count as f64 } else { 0.0 },
    })
}

/// JSON document for covariance files: `{kind, length, variances}` for
/// diagonals, `{kind, length, matrix}` for full matrices.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovarianceDocument {
    Diagonal { length: usize, variances: Vec<f64> },
    Full { length: usize, matrix: Vec<Vec<f64>> },
}

impl CovarianceDocument {
    pub fn from_diagonal(cov: &DiagonalCovariance) -> Self {
        CovarianceDocument::Diagonal { length: cov.len(), variances: cov.variances().to_vec() }
    }

    pub fn from_full(cov: &FullCovariance) -> Self {
        let n = cov.dim();
        let matrix =
            (0..n).map(|i| (0..n).map(|j| cov.matrix()[(i, j)]).collect()).collect();
        CovarianceDocument::Full { length: n, matrix }
    }

    pub fn into_diagonal(self) -> Result<DiagonalCovariance> {
        match self {
            CovarianceDocument::Diagonal { length, variances } => {
                if variances.len() != length {
                    return Err(Error::Serialization("length field mismatch".into()));
                }
                DiagonalCovariance::new(variances)
            }
            CovarianceDocument::Full { .. } => {
                Err(Error::Serialization("expected a diagonal covariance document".into()))
            }
        }
    }

    pub fn into_full(self) -> Result<FullCovariance> {
        match self {
            CovarianceDocument::Full { length, matrix } => {
                if matrix.len() != length || matrix.iter().any(|r| r.len() != length) {
                    return Err(Error::Serialization("matrix shape mismatch".into()));
                }
                let m = DMatrix::from_fn(length, length, |i, j| matrix[i][j]);
                FullCovariance::new(m)
            }
            CovarianceDocument::Diagonal { .. } => {
                Err(Error::Serialization("expected a full covariance document".into()))
            }
        }
    }
}
