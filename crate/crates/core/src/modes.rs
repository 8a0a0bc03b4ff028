//! Normal modes of a crystal about an equilibrium.
//!
//! The Hessian `H` of the total energy is mass weighted, `D = M^{-1/2} H
//! M^{-1/2}`, and diagonalized. Eigenvalues of `D` are squared angular
//! frequencies; eigenvectors are orthonormal in the mass-weighted metric.
//! Physical displacement patterns follow by dividing each component by
//! `√M_i`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::crystal::{si_potential, CrystalConfiguration};
use crate::error::{Error, Result};
use crate::trap::{Axis, TrapModel};

/// Eigenvalues above `-SOFT_MODE_TOLERANCE · max |λ|` count as non-negative.
pub const SOFT_MODE_TOLERANCE: f64 = 1e-9;

/// Fraction of the squared eigenvector norm an axis must carry to dominate.
pub const DOMINANT_AXIS_FRACTION: f64 = 0.9;

/// Analytic Hessian of the potential energy (N/m), `3N × 3N`.
pub fn hessian(trap: &TrapModel, c: &CrystalConfiguration) -> Result<DMatrix<f64>> {
    si_potential(trap, &c.ions)?.hessian(&c.flat())
}

/// `M^{-1/2} H M^{-1/2}` (s⁻²).
pub fn mass_weighted_hessian(trap: &TrapModel, c: &CrystalConfiguration) -> Result<DMatrix<f64>> {
    let mut h = hessian(trap, c)?;
    let inv_sqrt: Vec<f64> = c
        .ions
        .iter()
        .flat_map(|s| [s.mass_si().sqrt().recip(); 3])
        .collect();
    let n = h.nrows();
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(h)
}

/// Eigenpairs of the mass-weighted Hessian sorted by ascending eigenvalue.
fn sorted_eigen(d: DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = SymmetricEigen::new(d);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order
        .iter()
        .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
        .collect();
    (values, vectors)
}

fn negative_count(values: &[f64]) -> usize {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    values.iter().filter(|&&v| v < -SOFT_MODE_TOLERANCE * scale).count()
}

/// Squared frequencies (ascending) without any stability check.
pub fn squared_frequencies(trap: &TrapModel, c: &CrystalConfiguration) -> Result<Vec<f64>> {
    Ok(sorted_eigen(mass_weighted_hessian(trap, c)?).0)
}

/// Number of clearly negative Hessian eigenvalues.
pub fn negative_mode_count(trap: &TrapModel, c: &CrystalConfiguration) -> Result<usize> {
    Ok(negative_count(&squared_frequencies(trap, c)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalModeSet {
    /// Angular frequencies (rad/s), ascending.
    pub frequencies: Vec<f64>,
    /// Mass-weighted orthonormal eigenvectors, one per frequency, each laid
    /// out as `[x0, y0, z0, x1, ...]`.
    pub eigenvectors: Vec<Vec<f64>>,
    /// Modes whose eigenvalue was within tolerance of zero and clamped.
    pub soft: Vec<bool>,
    pub configuration: CrystalConfiguration,
}

/// Normal modes about an equilibrium. Fails with the count of negative
/// eigenvalues if the configuration is not a minimum.
pub fn normal_modes(trap: &TrapModel, c: &CrystalConfiguration) -> Result<NormalModeSet> {
    let (values, eigenvectors) = sorted_eigen(mass_weighted_hessian(trap, c)?);
    let negative = negative_count(&values);
    if negative > 0 {
        return Err(Error::UnstableConfiguration { negative_modes: negative });
    }
    let soft = values.iter().map(|&v| v <= 0.0).collect();
    let frequencies = values.iter().map(|&v| v.max(0.0).sqrt()).collect();
    Ok(NormalModeSet { frequencies, eigenvectors, soft, configuration: c.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeAxis {
    X,
    Y,
    Z,
    Mixed,
}

impl From<Axis> for ModeAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::X => ModeAxis::X,
            Axis::Y => ModeAxis::Y,
            Axis::Z => ModeAxis::Z,
        }
    }
}

/// Summary of one mode for comparison with measured spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDescriptor {
    pub index: usize,
    /// Angular frequency (rad/s).
    pub frequency: f64,
    pub axis: ModeAxis,
    /// Fraction of the squared eigenvector norm on x, y, z.
    pub axis_weights: [f64; 3],
    /// Physical displacement magnitude per ion, scaled to a maximum of 1.
    pub amplitudes: Vec<f64>,
    /// Ion `z` positions (m), used to split the chain at a boundary.
    pub axial_positions: Vec<f64>,
}

impl NormalModeSet {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Eigenvector component of mode `m` for ion `i` along `axis`.
    pub fn component(&self, m: usize, i: usize, axis: Axis) -> f64 {
        self.eigenvectors[m][3 * i + axis.index()]
    }

    /// Physical (mass-unweighted) displacement of ion `i` in mode `m`.
    pub fn physical_displacement(&self, m: usize, i: usize) -> [f64; 3] {
        let s = self.configuration.ions[i].mass_si().sqrt();
        let e = &self.eigenvectors[m];
        [e[3 * i] / s, e[3 * i + 1] / s, e[3 * i + 2] / s]
    }

    pub fn descriptor(&self, m: usize) -> ModeDescriptor {
        let e = &self.eigenvectors[m];
        let mut weights = [0.0; 3];
        for (k, v) in e.iter().enumerate() {
            weights[k % 3] += v * v;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let axis = Axis::ALL
            .into_iter()
            .find(|a| weights[a.index()] > DOMINANT_AXIS_FRACTION)
            .map(ModeAxis::from)
            .unwrap_or(ModeAxis::Mixed);
        let mut amplitudes: Vec<f64> = (0..self.configuration.len())
            .map(|i| {
                let d = self.physical_displacement(m, i);
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
            })
            .collect();
        let max = amplitudes.iter().fold(0.0f64, |a, b| a.max(*b));
        if max > 0.0 {
            amplitudes.iter_mut().for_each(|a| *a /= max);
        }
        ModeDescriptor {
            index: m,
            frequency: self.frequencies[m],
            axis,
            axis_weights: weights,
            amplitudes,
            axial_positions: self.configuration.positions.iter().map(|p| p[2]).collect(),
        }
    }

    pub fn descriptors(&self) -> Vec<ModeDescriptor> {
        (0..self.len()).map(|m| self.descriptor(m)).collect()
    }

    /// Descriptors of modes dominated by `axis`, ascending in frequency.
    pub fn modes_along(&self, axis: Axis) -> Vec<ModeDescriptor> {
        let want = ModeAxis::from(axis);
        self.descriptors().into_iter().filter(|d| d.axis == want).collect()
    }
}

/// Which part of a chain split at a boundary ion a mode lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainSide {
    /// Ions with `z` below the boundary ion.
    Lower,
    /// Ions with `z` above the boundary ion.
    Upper,
    /// The boundary ion itself carries the largest amplitude.
    Boundary,
}

fn split_maxima(m: &ModeDescriptor, boundary: usize) -> Result<(f64, f64)> {
    let len = m.amplitudes.len();
    if boundary >= len {
        return Err(Error::InvalidBoundary { index: boundary, len });
    }
    let zb = m.axial_positions[boundary];
    let (mut lower, mut upper) = (None::<f64>, None::<f64>);
    for (i, (&a, &z)) in m.amplitudes.iter().zip(&m.axial_positions).enumerate() {
        if i == boundary {
            continue;
        }
        let slot = if z < zb { &mut lower } else { &mut upper };
        *slot = Some(slot.map_or(a, |s| s.max(a)));
    }
    match (lower, upper) {
        (Some(l), Some(u)) => Ok((l, u)),
        _ => Err(Error::InvalidBoundary { index: boundary, len }),
    }
}

/// Ratio of the largest amplitude on one side of the boundary ion to the
/// largest on the other side, oriented to be `≥ 1`.
pub fn localization_ratio(m: &ModeDescriptor, boundary_index: usize) -> Result<f64> {
    let (l, u) = split_maxima(m, boundary_index)?;
    let (hi, lo) = if l >= u { (l, u) } else { (u, l) };
    Ok(if lo == 0.0 { f64::INFINITY } else { hi / lo })
}

/// Side of the chain a mode is localized on.
pub fn mode_side(m: &ModeDescriptor, boundary_index: usize) -> Result<ChainSide> {
    let (l, u) = split_maxima(m, boundary_index)?;
    let b = m.amplitudes[boundary_index];
    Ok(if b > l && b > u {
        ChainSide::Boundary
    } else if l >= u {
        ChainSide::Lower
    } else {
        ChainSide::Upper
    })
}

/// Amplitude of ion `index` relative to the largest amplitude of any other ion.
pub fn impurity_amplitude_ratio(m: &ModeDescriptor, index: usize) -> Result<f64> {
    let len = m.amplitudes.len();
    if index >= len || len < 2 {
        return Err(Error::InvalidBoundary { index, len });
    }
    let others = m
        .amplitudes
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != index)
        .fold(0.0f64, |acc, (_, a)| acc.max(*a));
    Ok(if others == 0.0 { f64::INFINITY } else { m.amplitudes[index] / others })
}

fn min_gap(freqs: &mut [f64]) -> Option<f64> {
    freqs.sort_by(f64::total_cmp);
    freqs.windows(2).map(|w| w[1] - w[0]).reduce(f64::min)
}

/// Smallest frequency spacing (rad/s) between x-transverse modes localized on
/// the same side of `boundary_index`. With no boundary all x modes form one
/// group. Modes dominated by the boundary ion are excluded.
pub fn min_same_side_gap(modes: &NormalModeSet, boundary_index: Option<usize>) -> Result<f64> {
    let x_modes = modes.modes_along(Axis::X);
    let Some(b) = boundary_index else {
        let mut f: Vec<f64> = x_modes.iter().map(|d| d.frequency).collect();
        return min_gap(&mut f).ok_or(Error::TooFewModes);
    };
    let (mut lower, mut upper) = (Vec::new(), Vec::new());
    for d in &x_modes {
        match mode_side(d, b)? {
            ChainSide::Lower => lower.push(d.frequency),
            ChainSide::Upper => upper.push(d.frequency),
            ChainSide::Boundary => {}
        }
    }
    [min_gap(&mut lower), min_gap(&mut upper)]
        .into_iter()
        .flatten()
        .reduce(f64::min)
        .ok_or(Error::TooFewModes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{khz, mhz, to_khz};
    use crate::crystal::{characteristic_length, find_equilibrium, SeedPolicy};
    use crate::trap::{IonSpecies, SpeciesFrequencies};

    const CA: IonSpecies = IonSpecies::CA40_PLUS;
    const CA2: IonSpecies = IonSpecies::CA40_2PLUS;

    fn trap(fx: f64, fy: f64, fz: f64) -> TrapModel {
        TrapModel::calibrate_from_frequencies(&CA, &SpeciesFrequencies::from_khz(fx, fy, fz), mhz(10.66))
            .unwrap()
    }

    fn modes_for(t: &TrapModel, ions: &[IonSpecies]) -> NormalModeSet {
        let eq = find_equilibrium(t, ions, &SeedPolicy::default()).unwrap();
        normal_modes(t, &eq.configuration).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn single_ion_hessian_and_modes() {
        let t = trap(480.0, 630.0, 119.0);
        let c = CrystalConfiguration::new(vec![CA], vec![[0.0; 3]]).unwrap();
        let h = hessian(&t, &c).unwrap();
        let m = CA.mass_si();
        for (k, f) in [480.0, 630.0, 119.0].into_iter().enumerate() {
            assert!(rel(h[(k, k)], m * khz(f).powi(2)) < 1e-12);
        }
        assert_eq!(h[(0, 1)], 0.0);
        let modes = normal_modes(&t, &c).unwrap();
        let want = [khz(119.0), khz(480.0), khz(630.0)];
        for (got, want) in modes.frequencies.iter().zip(want) {
            assert!(rel(*got, want) < 1e-12);
        }
    }

    #[test]
    fn two_ion_axial_block() {
        let t = trap(480.0, 630.0, 119.0);
        let ell = characteristic_length(&t, &CA).unwrap();
        let d = 2f64.cbrt() * ell;
        let c = CrystalConfiguration::new(vec![CA, CA], vec![[0.0, 0.0, -d / 2.0], [0.0, 0.0, d / 2.0]])
            .unwrap();
        let h = hessian(&t, &c).unwrap();
        let axial = nalgebra::Matrix2::new(h[(2, 2)], h[(2, 5)], h[(5, 2)], h[(5, 5)]);
        let mut ev: Vec<f64> = axial.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let unit = CA.mass_si() * khz(119.0).powi(2);
        assert!(rel(ev[0], unit) < 1e-10);
        assert!(rel(ev[1], 3.0 * unit) < 1e-10);
    }

    #[test]
    fn three_ion_analytic_spectrum() {
        let t = trap(480.0, 630.0, 119.0);
        let modes = modes_for(&t, &[CA, CA, CA]);
        let (wx, wz) = (khz(480.0), khz(119.0));
        let axial: Vec<f64> = modes.modes_along(Axis::Z).iter().map(|d| d.frequency).collect();
        for (got, want) in axial.iter().zip([wz, 3f64.sqrt() * wz, (29.0f64 / 5.0).sqrt() * wz]) {
            assert!(rel(*got, want) < 1e-9, "{got} {want}");
        }
        let radial: Vec<f64> = modes.modes_along(Axis::X).iter().map(|d| d.frequency).collect();
        let want = [(wx * wx - 2.4 * wz * wz).sqrt(), (wx * wx - wz * wz).sqrt(), wx];
        for (got, want) in radial.iter().zip(want) {
            assert!(rel(*got, want) < 1e-9, "{got} {want}");
        }
    }

    #[test]
    fn six_ion_impurity_spectrum() {
        let t = trap(480.0, 630.0, 119.0);
        let modes = modes_for(&t, &[CA, CA, CA2, CA, CA, CA]);
        let x: Vec<f64> = modes.modes_along(Axis::X).iter().map(|d| to_khz(d.frequency)).collect();
        let reference = [352.0, 403.0, 423.0, 463.0, 468.0, 1006.0];
        assert_eq!(x.len(), 6);
        for (got, want) in x.iter().zip(reference) {
            assert!(rel(*got, want) < 0.02, "{got} vs {want}");
        }
    }

    #[test]
    fn orthonormal_and_rayleigh() {
        let t = trap(480.0, 630.0, 119.0);
        let eq = find_equilibrium(&t, &[CA, CA2, CA, CA], &SeedPolicy::default()).unwrap();
        let modes = normal_modes(&t, &eq.configuration).unwrap();
        let d = mass_weighted_hessian(&t, &eq.configuration).unwrap();
        for m in 0..modes.len() {
            let em = nalgebra::DVector::from_vec(modes.eigenvectors[m].clone());
            for n in 0..modes.len() {
                let en = nalgebra::DVector::from_vec(modes.eigenvectors[n].clone());
                let want = if m == n { 1.0 } else { 0.0 };
                assert!((em.dot(&en) - want).abs() < 1e-10);
            }
            let rq = em.dot(&(&d * &em));
            assert!(rel(rq, modes.frequencies[m].powi(2)) < 1e-10);
        }
    }

    #[test]
    fn unstable_configuration_is_reported() {
        let t = trap(480.0, 630.0, 119.0).with_anisotropy(&CA, 0.5).unwrap();
        let lin = crate::crystal::find_linear_equilibrium(&t, &[CA, CA, CA]).unwrap();
        assert_eq!(
            normal_modes(&t, &lin.configuration).unwrap_err(),
            Error::UnstableConfiguration { negative_modes: 1 }
        );
    }

    #[test]
    fn com_mode_localization_is_unity() {
        let t = trap(480.0, 630.0, 119.0);
        let modes = modes_for(&t, &[CA; 5]);
        let com = modes.modes_along(Axis::X).into_iter().last().unwrap();
        assert!(rel(com.frequency, khz(480.0)) < 1e-9);
        assert!((localization_ratio(&com, 2).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_validation() {
        let t = trap(480.0, 630.0, 119.0);
        let modes = modes_for(&t, &[CA; 3]);
        let d = modes.descriptor(0);
        assert!(matches!(localization_ratio(&d, 0), Err(Error::InvalidBoundary { .. })));
        assert!(matches!(localization_ratio(&d, 2), Err(Error::InvalidBoundary { .. })));
        assert!(matches!(localization_ratio(&d, 3), Err(Error::InvalidBoundary { .. })));
        assert!(localization_ratio(&d, 1).is_ok());
    }

    #[test]
    fn six_ion_localization_and_gaps() {
        let t = trap(480.0, 630.0, 119.0);
        let modes = modes_for(&t, &[CA, CA, CA2, CA, CA, CA]);
        let x = modes.modes_along(Axis::X);
        let by_freq = |f: f64| {
            x.iter()
                .min_by(|a, b| (to_khz(a.frequency) - f).abs().total_cmp(&(to_khz(b.frequency) - f).abs()))
                .unwrap()
        };
        let r423 = localization_ratio(by_freq(423.0), 2).unwrap();
        let r403 = localization_ratio(by_freq(403.0), 2).unwrap();
        assert!((20.0..=45.0).contains(&r423), "{r423}");
        // ≈47 in this model; only the lower bound is pinned
        assert!(r403 >= 20.0, "{r403}");
        assert_eq!(mode_side(by_freq(1006.0), 2).unwrap(), ChainSide::Boundary);
        let gap = to_khz(min_same_side_gap(&modes, Some(2)).unwrap());
        assert!((gap - 45.0).abs() < 5.0, "{gap}");
        let pure = modes_for(&t, &[CA; 6]);
        let gap = to_khz(min_same_side_gap(&pure, None).unwrap());
        assert!((gap - 15.0).abs() < 5.0, "{gap}");
    }

    #[test]
    fn two_ion_gap() {
        let t = trap(480.0, 630.0, 119.0);
        let modes = modes_for(&t, &[CA, CA]);
        let (wx, wz) = (khz(480.0), khz(119.0));
        let gap = min_same_side_gap(&modes, None).unwrap();
        assert!(rel(gap, wx - (wx * wx - wz * wz).sqrt()) < 1e-9);
        let single = modes_for(&t, &[CA]);
        assert_eq!(min_same_side_gap(&single, None).unwrap_err(), Error::TooFewModes);
    }

    #[test]
    fn doubly_charged_dominates_highest_radial_mode() {
        for (fx, fy) in [(480.0, 630.0), (300.0, 515.0)] {
            let t = trap(fx, fy, 119.0);
            for ions in [[CA, CA2, CA], [CA2, CA, CA]] {
                let modes = modes_for(&t, &ions);
                let top = modes.modes_along(Axis::X).into_iter().last().unwrap();
                let idx = ions.iter().position(|s| *s == CA2).unwrap();
                let r = impurity_amplitude_ratio(&top, idx).unwrap();
                assert!(r > 20.0, "{fx} {ions:?}: {r}");
            }
        }
    }
}
