//! Observation operator, synthetic observation generation for twin
//! experiments, quality-control filtering and the withheld verification
//! split.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::StateVector;
use crate::error::{Error, Result};
use crate::latent::QualityMask;

/// Fixed set of observed grid indices with per-index noise standard
/// deviations. The network does not change across cycles of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationNetwork {
    observed_indices: Vec<usize>,
    noise_std: Vec<f64>,
}

impl ObservationNetwork {
    pub fn new(observed_indices: Vec<usize>, noise_std: Vec<f64>) -> Result<Self> {
        if observed_indices.len() != noise_std.len() {
            return Err(Error::Config(format!(
                "{} indices but {} noise values",
                observed_indices.len(),
                noise_std.len()
            )));
        }
        if observed_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("observed indices must be sorted and unique".into()));
        }
        if noise_std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("noise standard deviations must be non-negative".into()));
        }
        Ok(ObservationNetwork { observed_indices, noise_std })
    }

    /// Every `spacing`-th grid point, with noise `c * sigma_clim` per point.
    pub fn every_kth(n_x: usize, spacing: usize, noise_level: f64, sigma_clim: &[f64]) -> Result<Self> {
        if spacing == 0 {
            return Err(Error::Config("spacing must be >= 1".into()));
        }
        if sigma_clim.len() != n_x {
            return Err(Error::Config(format!(
                "sigma_clim length {} does not match n_x {}",
                sigma_clim.len(),
                n_x
            )));
        }
        let indices: Vec<usize> = (0..n_x).step_by(spacing).collect();
        let noise = indices.iter().map(|&i| noise_level * sigma_clim[i]).collect();
        ObservationNetwork::new(indices, noise)
    }

    pub fn empty() -> Self {
        ObservationNetwork { observed_indices: Vec::new(), noise_std: Vec::new() }
    }

    pub fn observed_indices(&self) -> &[usize] {
        &self.observed_indices
    }

    pub fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    pub fn len(&self) -> usize {
        self.observed_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_indices.is_empty()
    }

    fn check_against(&self, n_x: usize) -> Result<()> {
        if let Some(&max) = self.observed_indices.last() {
            if max >= n_x {
                return Err(Error::Config(format!(
                    "observed index {max} out of range for n_x {n_x}"
                )));
            }
        }
        Ok(())
    }
}

/// Observed values at one cycle time, with the dense quality mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub network: ObservationNetwork,
    /// Values at the network's observed indices, in index order.
    pub values: Vec<f64>,
    /// Dense mask over the full grid: zero exactly off the network.
    pub mask: QualityMask,
    pub cycle_time: i64,
}

impl ObservationSet {
    pub fn new(
        network: ObservationNetwork,
        values: Vec<f64>,
        mask: QualityMask,
        cycle_time: i64,
    ) -> Result<Self> {
        if values.len() != network.len() {
            return Err(Error::Contract(format!(
                "{} values for {} observed indices",
                values.len(),
                network.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("observation values must be finite".into()));
        }
        let set = ObservationSet { network, values, mask, cycle_time };
        set.check_mask()?;
        Ok(set)
    }

    fn check_mask(&self) -> Result<()> {
        let observed: std::collections::BTreeSet<usize> =
            self.network.observed_indices.iter().copied().collect();
        for (i, &m) in self.mask.values().iter().enumerate() {
            if !observed.contains(&i) && m != 0.0 {
                return Err(Error::Contract(format!(
                    "mask is nonzero at unobserved index {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.mask.len()
    }

    /// Value and mask at a grid index, zero off the network.
    pub fn dense_value(&self, index: usize) -> f64 {
        match self.network.observed_indices.binary_search(&index) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    /// Number of points carrying a usable (mask > 0) observation.
    pub fn active_count(&self) -> usize {
        self.network
            .observed_indices
            .iter()
            .filter(|&&i| self.mask.values()[i] > 0.0)
            .count()
    }
}

/// Gather state values at the network's observed indices (the linear H).
pub fn apply_h(state: &StateVector, network: &ObservationNetwork) -> Result<Vec<f64>> {
    network.check_against(state.len())?;
    Ok(network.observed_indices.iter().map(|&i| state.values()[i]).collect())
}

/// Simulated observations: `H(truth)` plus independent Gaussian noise with
/// the network's per-point standard deviation; mask 1 on the network.
pub fn synthesize_observations<R: Rng + ?Sized>(
    truth: &StateVector,
    network: &ObservationNetwork,
    cycle_time: i64,
    rng: &mut R,
) -> Result<ObservationSet> {
    let clean = apply_h(truth, network)?;
    let mut values = Vec::with_capacity(clean.len());
    for (v, &std) in clean.iter().zip(network.noise_std()) {
        if std > 0.0 {
            let dist = Normal::new(0.0, std)
                .map_err(|e| Error::Config(format!("bad noise std: {e}")))?;
            values.push(v + dist.sample(rng));
        } else {
            values.push(*v);
        }
    }
    let mut mask = vec![0.0; truth.len()];
    for &i in network.observed_indices() {
        mask[i] = 1.0;
    }
    ObservationSet::new(network.clone(), values, QualityMask::new(mask)?, cycle_time)
}

/// Discard observations whose departure from `reference` exceeds the
/// per-coordinate threshold: rejected points get mask 0 and value 0.
pub fn qc_filter(
    obs: &ObservationSet,
    reference: &StateVector,
    thresholds: &[f64],
) -> Result<ObservationSet> {
    if reference.len() != obs.n_x() || thresholds.len() != obs.n_x() {
        return Err(Error::Contract(format!(
            "qc_filter length mismatch: obs grid {}, reference {}, thresholds {}",
            obs.n_x(),
            reference.len(),
            thresholds.len()
        )));
    }
    let mut values = obs.values.clone();
    let mut mask = obs.mask.values().to_vec();
    for (pos, &idx) in obs.network.observed_indices().iter().enumerate() {
        if (values[pos] - reference.values()[idx]).abs() > thresholds[idx] {
            values[pos] = 0.0;
            mask[idx] = 0.0;
        }
    }
    ObservationSet::new(obs.network.clone(), values, QualityMask::new(mask)?, obs.cycle_time)
}

/// Split off a withheld verification subset. The withheld count is the
/// requested fraction rounded to the nearest point; the partition is a
/// deterministic function of the rng state.
pub fn split_withheld<R: Rng + ?Sized>(
    obs: &ObservationSet,
    fraction: f64,
    rng: &mut R,
) -> Result<(ObservationSet, ObservationSet)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Contract(format!(
            "withheld fraction must be in [0, 1), got {fraction}"
        )));
    }
    let n = obs.network.len();
    let n_withheld = (fraction * n as f64).round() as usize;

    // Partial Fisher-Yates over positions.
    let mut positions: Vec<usize> = (0..n).collect();
    for k in 0..n_withheld.min(n) {
        let j = rng.gen_range(k..n);
        positions.swap(k, j);
    }
    let mut withheld_positions: Vec<usize> = positions[..n_withheld].to_vec();
    withheld_positions.sort_unstable();

    let build = |keep: &dyn Fn(usize) -> bool| -> Result<ObservationSet> {
        let mut indices = Vec::new();
        let mut noise = Vec::new();
        let mut values = Vec::new();
        let mut mask = vec![0.0; obs.n_x()];
        for (pos, &idx) in obs.network.observed_indices().iter().enumerate() {
            if keep(pos) {
                indices.push(idx);
                noise.push(obs.network.noise_std()[pos]);
                values.push(obs.values[pos]);
                mask[idx] = obs.mask.values()[idx];
            }
        }
        ObservationSet::new(
            ObservationNetwork::new(indices, noise)?,
            values,
            QualityMask::new(mask)?,
            obs.cycle_time,
        )
    };

    let withheld_set: std::collections::BTreeSet<usize> =
        withheld_positions.iter().copied().collect();
    let assimilated = build(&|pos| !withheld_set.contains(&pos))?;
    let withheld = build(&|pos| withheld_set.contains(&pos))?;
    Ok((assimilated, withheld))
}

/// One row of the observation CSV export.
#[derive(Debug, Clone)]
pub struct ObsCsvRow {
    pub cycle_time: i64,
    pub index: usize,
    pub value: f64,
    pub mask: f64,
    pub withheld: bool,
}

/// Serialize observation sets as CSV with columns
/// `cycle_time,index,value,mask,withheld`.
pub fn write_observations_csv<W: Write>(
    writer: &mut W,
    pairs: &[(ObservationSet, Option<ObservationSet>)],
) -> Result<()> {
    writeln!(writer, "cycle_time,index,value,mask,withheld")?;
    for (assimilated, withheld) in pairs {
        let mut rows = Vec::new();
        for (pos, &idx) in assimilated.network.observed_indices().iter().enumerate() {
            rows.push(ObsCsvRow {
                cycle_time: assimilated.cycle_time,
                index: idx,
                value: assimilated.values[pos],
                mask: assimilated.mask.values()[idx],
                withheld: false,
            });
        }
        if let Some(w) = withheld {
            for (pos, &idx) in w.network.observed_indices().iter().enumerate() {
                rows.push(ObsCsvRow {
                    cycle_time: w.cycle_time,
                    index: idx,
                    value: w.values[pos],
                    mask: w.mask.values()[idx],
                    withheld: true,
                });
            }
        }
        rows.sort_by_key(|r| r.index);
        for r in rows {
            writeln!(
                writer,
                "{},{},{},{},{}",
                r.cycle_time,
                r.index,
                r.value,
                r.mask,
                if r.withheld { 1 } else { 0 }
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn network_1_in_3(sigma: f64) -> ObservationNetwork {
        ObservationNetwork::every_kth(40, 3, 0.03, &vec![sigma / 0.03; 40]).unwrap()
    }

    #[test]
    fn full_network_h_is_identity() {
        let net = ObservationNetwork::new((0..8).collect(), vec![0.1; 8]).unwrap();
        let x = StateVector::new((0..8).map(|i| i as f64).collect()).unwrap();
        assert_eq!(apply_h(&x, &net).unwrap(), x.values());
    }

    #[test]
    fn empty_network_gives_empty_vector() {
        let x = StateVector::zeros(8);
        assert!(apply_h(&x, &ObservationNetwork::empty()).unwrap().is_empty());
    }

    #[test]
    fn h_is_linear() {
        let net = ObservationNetwork::new(vec![1, 4, 6], vec![0.1; 3]).unwrap();
        let x = StateVector::new((0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let y = StateVector::new((0..8).map(|i| (i as f64).cos()).collect()).unwrap();
        let (a, b) = (2.5, -1.25);
        let combo = StateVector::new(
            x.values().iter().zip(y.values()).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let hx = apply_h(&x, &net).unwrap();
        let hy = apply_h(&y, &net).unwrap();
        let hc = apply_h(&combo, &net).unwrap();
        for i in 0..3 {
            assert!((hc[i] - (a * hx[i] + b * hy[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_reproduces_truth_exactly() {
        let net = ObservationNetwork::new(vec![0, 5, 9], vec![0.0; 3]).unwrap();
        let truth = StateVector::new((0..10).map(|i| i as f64 * 0.25).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        assert_eq!(obs.values, vec![0.0, 1.25, 2.25]);
        assert_eq!(obs.mask.values()[5], 1.0);
        assert_eq!(obs.mask.values()[1], 0.0);
    }

    #[test]
    fn sample_noise_std_matches_specification() {
        // Over 10,000 draws the per-point sample std should be within 3%
        // of the requested value.
        let sigma = 0.6;
        let net = ObservationNetwork::new(vec![0, 2], vec![sigma, sigma]).unwrap();
        let truth = StateVector::zeros(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sums = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        let n = 10_000;
        for t in 0..n {
            let obs = synthesize_observations(&truth, &net, t, &mut rng).unwrap();
            for k in 0..2 {
                sums[k] += obs.values[k];
                sq[k] += obs.values[k] * obs.values[k];
            }
        }
        for k in 0..2 {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let std = var.sqrt();
            assert!(
                (std - sigma).abs() / sigma < 0.03,
                "sample std {std} vs requested {sigma}"
            );
        }
    }

    #[test]
    fn qc_keeps_everything_below_threshold() {
        let net = network_1_in_3(0.5);
        let truth = StateVector::uniform(40, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        let filtered = qc_filter(&obs, &truth, &vec![1e9; 40]).unwrap();
        assert_eq!(filtered, obs);
    }

    #[test]
    fn qc_zero_threshold_rejects_all() {
        let net = network_1_in_3(0.5);
        let truth = StateVector::uniform(40, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        let filtered = qc_filter(&obs, &truth, &vec![0.0; 40]).unwrap();
        assert_eq!(filtered.active_count(), 0);
        assert!(filtered.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn qc_rejects_exactly_the_injected_outlier() {
        let sigma = 0.5;
        let net = network_1_in_3(sigma);
        let truth = StateVector::uniform(40, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        // 10-sigma outlier at the third network point (grid index 6).
        obs.values[2] += 10.0 * sigma;
        let thresholds = vec![5.0 * sigma; 40];
        let filtered = qc_filter(&obs, &truth, &thresholds).unwrap();
        assert_eq!(filtered.mask.values()[6], 0.0);
        assert_eq!(filtered.values[2], 0.0);
        let rejected: Vec<usize> = filtered
            .network
            .observed_indices()
            .iter()
            .enumerate()
            .filter(|(_, &i)| filtered.mask.values()[i] == 0.0)
            .map(|(pos, _)| pos)
            .collect();
        assert_eq!(rejected, vec![2]);
    }

    #[test]
    fn qc_never_modifies_retained_values() {
        let net = network_1_in_3(0.5);
        let truth = StateVector::uniform(40, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        let filtered = qc_filter(&obs, &truth, &vec![0.8; 40]).unwrap();
        for (pos, &idx) in filtered.network.observed_indices().iter().enumerate() {
            if filtered.mask.values()[idx] > 0.0 {
                assert_eq!(filtered.values[pos], obs.values[pos]);
            }
        }
    }

    #[test]
    fn split_zero_fraction_withholds_nothing() {
        let net = network_1_in_3(0.5);
        let truth = StateVector::uniform(40, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        let (a, w) = split_withheld(&obs, 0.0, &mut rng).unwrap();
        assert_eq!(a.network.len(), obs.network.len());
        assert!(w.network.is_empty());
    }

    #[test]
    fn split_rounds_to_nearest_point() {
        let net = ObservationNetwork::new((0..13).collect(), vec![0.1; 13]).unwrap();
        let truth = StateVector::zeros(13);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        let (a, w) = split_withheld(&obs, 0.1, &mut rng).unwrap();
        assert_eq!(w.network.len(), 1);
        assert_eq!(a.network.len(), 12);
    }

    #[test]
    fn split_is_a_partition() {
        let net = network_1_in_3(0.5);
        let truth = StateVector::uniform(40, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        let (a, w) = split_withheld(&obs, 0.3, &mut rng).unwrap();
        let mut union: Vec<usize> = a
            .network
            .observed_indices()
            .iter()
            .chain(w.network.observed_indices())
            .copied()
            .collect();
        union.sort_unstable();
        assert_eq!(union, obs.network.observed_indices());
        for i in a.network.observed_indices() {
            assert!(!w.network.observed_indices().contains(i));
        }
    }

    #[test]
    fn split_fixed_for_fixed_seed() {
        let net = network_1_in_3(0.5);
        let truth = StateVector::uniform(40, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = synthesize_observations(&truth, &net, 0, &mut rng).unwrap();
        let (_, w1) = split_withheld(&obs, 0.2, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let (_, w2) = split_withheld(&obs, 0.2, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(w1.network.observed_indices(), w2.network.observed_indices());
    }

    #[test]
    fn csv_format_is_stable() {
        let net = ObservationNetwork::new(vec![0, 2], vec![0.0, 0.0]).unwrap();
        let truth = StateVector::new(vec![1.5, 0.0, -2.25, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = synthesize_observations(&truth, &net, 3, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_observations_csv(&mut buf, &[(obs, None)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "cycle_time,index,value,mask,withheld\n3,0,1.5,1,0\n3,2,-2.25,1,0\n"
        );
    }

    #[test]
    fn mask_value_consistency_contract() {
        let net = ObservationNetwork::new(vec![1], vec![0.1]).unwrap();
        // Mask nonzero off the network must be rejected.
        let bad_mask = QualityMask::new(vec![0.5, 1.0, 0.0]).unwrap();
        assert!(ObservationSet::new(net, vec![1.0], bad_mask, 0).is_err());
    }
}
