//! The latent-space observation-background update with its uncertainty
//! propagation, plus four variational baselines minimized with the
//! differentiation engine.

mod variational;

pub use variational::{
    solve_3dvar, solve_4dvar, solve_l3dvar, solve_l4dvar, VariationalSettings,
};

use serde::{Deserialize, Serialize};

use crate::covariance::DiagonalCovariance;
use crate::dynamics::{forecast_state, ModelConfig, StateVector};
use crate::error::{Error, Result};
use crate::latent::{o2l_forward, AutoencoderModel, LatentVector, O2LModel};
use crate::observations::ObservationSet;

/// Which assimilation method produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Hloba,
    H3dvar,
    H4dvar,
    Hl3dvar,
    Hl4dvar,
}

impl MethodKind {
    pub fn is_latent(&self) -> bool {
        matches!(self, MethodKind::Hloba | MethodKind::Hl3dvar | MethodKind::Hl4dvar)
    }

    pub fn is_window_joint(&self) -> bool {
        matches!(self, MethodKind::H4dvar | MethodKind::Hl4dvar)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Hloba => "hloba",
            MethodKind::H3dvar => "h3dvar",
            MethodKind::H4dvar => "h4dvar",
            MethodKind::Hl3dvar => "hl3dvar",
            MethodKind::Hl4dvar => "hl4dvar",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hloba" => Ok(MethodKind::Hloba),
            "h3dvar" => Ok(MethodKind::H3dvar),
            "h4dvar" => Ok(MethodKind::H4dvar),
            "hl3dvar" => Ok(MethodKind::Hl3dvar),
            "hl4dvar" => Ok(MethodKind::Hl4dvar),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Optimizer bookkeeping attached to every analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
    pub stalled: bool,
}

impl SolverDiagnostics {
    pub fn direct() -> Self {
        SolverDiagnostics {
            iterations: 0,
            initial_cost: 0.0,
            final_cost: 0.0,
            final_grad_norm: 0.0,
            converged: true,
            stalled: false,
        }
    }
}

/// One analysis: the model-space state plus whatever latent quantities the
/// method produces.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub method: MethodKind,
    pub x_a: StateVector,
    pub z_a: Option<LatentVector>,
    /// Diagonal of the latent analysis-error covariance, when diagnosed.
    pub latent_variance: Option<DiagonalCovariance>,
    /// Per-grid-point analysis-error variance, when diagnosed.
    pub model_variance: Option<Vec<f64>>,
    /// For window-joint methods: the analysis trajectory at each slot.
    pub window_states: Option<Vec<StateVector>>,
    pub diagnostics: SolverDiagnostics,
}

/// Elementwise latent update: per dimension `i`,
/// `z_a = z_b + B / (B + R) * (z_o - z_b)` with analysis variance
/// `B R / (B + R)`. No iteration is involved.
pub fn hloba_update(
    z_b: &LatentVector,
    z_o: &LatentVector,
    bz: &DiagonalCovariance,
    rz: &DiagonalCovariance,
) -> Result<(LatentVector, DiagonalCovariance)> {
    let n = z_b.len();
    if z_o.len() != n || bz.len() != n || rz.len() != n {
        return Err(Error::Contract(format!(
            "hloba_update length mismatch: z_b {}, z_o {}, B_z {}, R_z {}",
            n,
            z_o.len(),
            bz.len(),
            rz.len()
        )));
    }
    let mut z_a = Vec::with_capacity(n);
    let mut a_z = Vec::with_capacity(n);
    for i in 0..n {
        let b = bz.variances()[i];
        let r = rz.variances()[i];
        if !(b > 0.0) || !(r > 0.0) {
            return Err(Error::Contract(format!(
                "variances must be positive at dimension {i}: B = {b}, R = {r}"
            )));
        }
        let gain = b / (b + r);
        z_a.push(z_b.values()[i] + gain * (z_o.values()[i] - z_b.values()[i]));
        a_z.push(b * r / (b + r));
    }
    Ok((LatentVector::new(z_a)?, DiagonalCovariance::new(a_z)?))
}

/// Push the diagnosed latent spread into model space: perturb the latent
/// analysis along the increment direction by one standard deviation and take
/// half the decoded difference, squared per grid point.
pub fn propagate_uncertainty(
    decoder: &AutoencoderModel,
    z_a: &LatentVector,
    z_b: &LatentVector,
    diag_az: &DiagonalCovariance,
) -> Result<Vec<f64>> {
    let n = z_a.len();
    if z_b.len() != n || diag_az.len() != n {
        return Err(Error::Contract("propagate_uncertainty length mismatch".into()));
    }
    let sigma = diag_az.std_devs();
    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    for i in 0..n {
        let increment = z_a.values()[i] - z_b.values()[i];
        // sign(0) is +1 by convention; the squared central difference does
        // not depend on the choice.
        let s = if increment < 0.0 { -1.0 } else { 1.0 };
        plus.push(z_a.values()[i] + sigma[i] * s);
        minus.push(z_a.values()[i] - sigma[i] * s);
    }
    let d_plus = decoder.decode(&LatentVector::new(plus)?)?;
    let d_minus = decoder.decode(&LatentVector::new(minus)?)?;
    Ok(d_plus
        .values()
        .iter()
        .zip(d_minus.values())
        .map(|(p, m)| (0.5 * (p - m)).powi(2))
        .collect())
}

/// Per-slot record of a sequential latent window.
#[derive(Debug, Clone)]
pub struct HlobaSlotRecord {
    pub time: i64,
    pub x_b: StateVector,
    pub z_b: LatentVector,
    pub z_o: LatentVector,
    pub z_a: LatentVector,
    pub latent_variance: DiagonalCovariance,
    pub x_a: StateVector,
    pub model_variance: Vec<f64>,
    pub bz: DiagonalCovariance,
    pub rz: DiagonalCovariance,
}

/// Assimilate a window of observation slots sequentially: encode the
/// background, map the observations, update, decode, and forecast to the
/// next slot. `covariances` supplies per-slot `(B_z, R_z)` so callers can
/// refresh ensemble statistics between slots.
pub fn hloba_sequential_window<F>(
    ae: &AutoencoderModel,
    o2l: &O2LModel,
    model: &ModelConfig,
    x_b0: &StateVector,
    window_obs: &[ObservationSet],
    mut covariances: F,
) -> Result<(Vec<HlobaSlotRecord>, AnalysisResult)>
where
    F: FnMut(usize, &StateVector, &ObservationSet) -> Result<(DiagonalCovariance, DiagonalCovariance)>,
{
    if window_obs.is_empty() {
        return Err(Error::Contract("window must contain at least one observation slot".into()));
    }
    let mut records = Vec::with_capacity(window_obs.len());
    let mut x_b = x_b0.clone();
    for (slot, obs) in window_obs.iter().enumerate() {
        let z_b = ae.encode(&x_b)?;
        let z_o = o2l_forward(o2l, obs)?;
        let (bz, rz) = covariances(slot, &x_b, obs)?;
        let (z_a, diag_az) = hloba_update(&z_b, &z_o, &bz, &rz)?;
        let x_a = ae.decode(&z_a)?;
        let model_variance = propagate_uncertainty(ae, &z_a, &z_b, &diag_az)?;
        records.push(HlobaSlotRecord {
            time: obs.cycle_time,
            x_b: x_b.clone(),
            z_b,
            z_o,
            z_a,
            latent_variance: diag_az,
            x_a: x_a.clone(),
            model_variance,
            bz,
            rz,
        });
        if slot + 1 < window_obs.len() {
            x_b = forecast_state(&x_a, model.steps_per_da_interval, model)?;
        }
    }
    let last = records.last().expect("window is non-empty");
    let result = AnalysisResult {
        method: MethodKind::Hloba,
        x_a: last.x_a.clone(),
        z_a: Some(last.z_a.clone()),
        latent_variance: Some(last.latent_variance.clone()),
        model_variance: Some(last.model_variance.clone()),
        window_states: Some(records.iter().map(|r| r.x_a.clone()).collect()),
        diagnostics: SolverDiagnostics::direct(),
    };
    Ok((records, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::fit_linear_ae;
    use nalgebra::{DMatrix, DVector};
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
    fn equal_variances_average_background_and_observation() {
        let z_b = LatentVector::new(vec![1.0, -2.0]).unwrap();
        let z_o = LatentVector::new(vec![3.0, 2.0]).unwrap();
        let b = DiagonalCovariance::new(vec![0.5, 2.0]).unwrap();
        let (z_a, a_z) = hloba_update(&z_b, &z_o, &b, &b).unwrap();
        assert_eq!(z_a.values(), &[2.0, 0.0]);
        assert_eq!(a_z.variances(), &[0.25, 1.0]);
    }

    #[test]
    fn uninformative_observation_keeps_background() {
        let z_b = LatentVector::new(vec![1.0]).unwrap();
        let z_o = LatentVector::new(vec![100.0]).unwrap();
        let b = DiagonalCovariance::new(vec![2.0]).unwrap();
        let r = DiagonalCovariance::new(vec![2.0e12]).unwrap();
        let (z_a, a_z) = hloba_update(&z_b, &z_o, &b, &r).unwrap();
        assert!((z_a.values()[0] - 1.0).abs() < 1e-9);
        assert!((a_z.variances()[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn matches_dense_blue_oracle() {
        // General BLUE with explicit diagonal matrices and a dense solve.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(2..10usize);
            let z_b: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z_o: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..4.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..4.0)).collect();

            let (z_a, a_z) = hloba_update(
                &LatentVector::new(z_b.clone()).unwrap(),
                &LatentVector::new(z_o.clone()).unwrap(),
                &DiagonalCovariance::new(b.clone()).unwrap(),
                &DiagonalCovariance::new(r.clone()).unwrap(),
            )
            .unwrap();

            let bm = DMatrix::from_diagonal(&DVector::from_vec(b.clone()));
            let rm = DMatrix::from_diagonal(&DVector::from_vec(r.clone()));
            let sum = &bm + &rm;
            let k = &bm * sum.clone().lu().try_inverse().unwrap();
            let innovation = DVector::from_vec(
                z_o.iter().zip(&z_b).map(|(o, bb)| o - bb).collect::<Vec<_>>(),
            );
            let za_oracle = DVector::from_vec(z_b.clone()) + &k * innovation;
            let az_oracle = (DMatrix::identity(n, n) - &k) * &bm;

            for i in 0..n {
                assert!((z_a.values()[i] - za_oracle[i]).abs() <= 1e-12);
                assert!((a_z.variances()[i] - az_oracle[(i, i)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn analysis_variance_below_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let b = rng.gen_range(1e-6..10.0);
            let r = rng.gen_range(1e-6..10.0);
            let (_, a_z) = hloba_update(
                &LatentVector::new(vec![0.0]).unwrap(),
                &LatentVector::new(vec![1.0]).unwrap(),
                &DiagonalCovariance::new(vec![b]).unwrap(),
                &DiagonalCovariance::new(vec![r]).unwrap(),
            )
            .unwrap();
            assert!(a_z.variances()[0] <= b.min(r) + 1e-18);
        }
    }

    #[test]
    fn update_is_permutation_equivariant() {
        let z_b = vec![1.0, -2.0, 0.5, 3.0];
        let z_o = vec![0.0, 1.0, 2.0, -1.0];
        let b = vec![0.5, 1.0, 2.0, 0.1];
        let r = vec![1.5, 0.2, 0.7, 0.9];
        let (z_a, _) = hloba_update(
            &LatentVector::new(z_b.clone()).unwrap(),
            &LatentVector::new(z_o.clone()).unwrap(),
            &DiagonalCovariance::new(b.clone()).unwrap(),
            &DiagonalCovariance::new(r.clone()).unwrap(),
        )
        .unwrap();
        let perm = [2usize, 0, 3, 1];
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let (z_a_p, _) = hloba_update(
            &LatentVector::new(pick(&z_b)).unwrap(),
            &LatentVector::new(pick(&z_o)).unwrap(),
            &DiagonalCovariance::new(pick(&b)).unwrap(),
            &DiagonalCovariance::new(pick(&r)).unwrap(),
        )
        .unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(z_a_p.values()[k], z_a.values()[i]);
        }
    }

    #[test]
    fn nonpositive_variance_is_a_contract_error() {
        let z = LatentVector::new(vec![0.0]).unwrap();
        let good = DiagonalCovariance::new(vec![1.0]).unwrap();
        let zero = DiagonalCovariance::new(vec![0.0]).unwrap();
        assert!(matches!(hloba_update(&z, &z, &zero, &good), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_spread_propagates_to_zero_model_variance() {
        let data = random_states(8, 100, 3);
        let ae = fit_linear_ae(&data, 3).unwrap();
        let z = LatentVector::new(vec![0.5, -0.2, 1.0]).unwrap();
        let var = propagate_uncertainty(
            &ae,
            &z,
            &z,
            &DiagonalCovariance::new(vec![0.0; 3]).unwrap(),
        )
        .unwrap();
        assert!(var.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_decoder_matches_direct_matrix_evaluation() {
        let data = random_states(8, 200, 4);
        let ae = fit_linear_ae(&data, 3).unwrap();
        let z_a = LatentVector::new(vec![0.4, -1.0, 0.3]).unwrap();
        let z_b = LatentVector::new(vec![0.1, -0.5, 0.9]).unwrap();
        let az = DiagonalCovariance::new(vec![0.04, 0.09, 0.01]).unwrap();
        let got = propagate_uncertainty(&ae, &z_a, &z_b, &az).unwrap();

        // Direct evaluation: for the affine decoder the central difference
        // is exactly the linear map of sigma * sign, scaled back per
        // coordinate by the normalization.
        let p = &ae.decoder[0].weight; // n_z x n_x
        let sigma = az.std_devs();
        let s: Vec<f64> = z_a
            .values()
            .iter()
            .zip(z_b.values())
            .map(|(a, b)| if a - b < 0.0 { -1.0 } else { 1.0 })
            .collect();
        for j in 0..8 {
            let mut push = 0.0;
            for k in 0..3 {
                push += sigma[k] * s[k] * p.get(k, j);
            }
            let want = (push * ae.normalization.scale[j]).powi(2);
            assert!((got[j] - want).abs() <= 1e-12 * want.max(1.0), "{} vs {}", got[j], want);
        }
    }

    #[test]
    fn sign_flip_of_increment_leaves_variance_unchanged() {
        let data = random_states(8, 200, 5);
        let ae = fit_linear_ae(&data, 3).unwrap();
        let z_a = LatentVector::new(vec![0.4, -1.0, 0.3]).unwrap();
        let up = LatentVector::new(vec![0.5, -0.9, 0.4]).unwrap();
        let down = LatentVector::new(vec![0.3, -1.1, 0.2]).unwrap();
        let az = DiagonalCovariance::new(vec![0.04, 0.09, 0.01]).unwrap();
        let a = propagate_uncertainty(&ae, &z_a, &up, &az).unwrap();
        let b = propagate_uncertainty(&ae, &z_a, &down, &az).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
