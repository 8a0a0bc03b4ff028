//! Linear Paul trap in the pseudopotential approximation.
//!
//! The trap is described by four numbers: the rf drive frequency `Ω`, the
//! axial static curvature `β`, the rf curvature `γ` and a radial static
//! curvature `β_rad` produced by an offset voltage on the DC electrodes. For a
//! species of charge `q` and mass `M`
//!
//! ```text
//! ω_z²     = 4 qβ/M
//! ω_{x,y}² = 2 ((qγ/(MΩ))² − qβ/M ∓ qβ_rad/M)
//! ```
//!
//! so the dynamic (rf) part of the radial confinement scales as `(q/M)²` while
//! the static parts scale as `q/M`. This is what makes a doubly charged ion so
//! much stiffer radially than its singly charged neighbours.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::constants::{ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE};
use crate::error::{Error, Result};

/// Lab axis. `x` is the soft radial axis and hosts the zigzag plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// An ion species: charge number (units of e) and mass (u).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    charge_number: u32,
    mass: f64,
}

impl IonSpecies {
    /// Singly charged calcium-40, mass taken as 40 u.
    pub const CA40_PLUS: IonSpecies = IonSpecies { charge_number: 1, mass: 40.0 };
    /// Doubly charged calcium-40, mass taken as 40 u.
    pub const CA40_2PLUS: IonSpecies = IonSpecies { charge_number: 2, mass: 40.0 };

    pub fn new(charge_number: u32, mass: f64) -> Result<Self> {
        if charge_number == 0 {
            return Err(Error::InvalidInput("charge number must be at least 1".into()));
        }
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::InvalidInput(format!("mass must be positive, got {mass}")));
        }
        Ok(IonSpecies { charge_number, mass })
    }

    pub fn charge_number(&self) -> u32 {
        self.charge_number
    }

    /// Mass in atomic mass units.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Charge in coulombs.
    pub fn charge_si(&self) -> f64 {
        self.charge_number as f64 * ELEMENTARY_CHARGE
    }

    /// Mass in kilograms.
    pub fn mass_si(&self) -> f64 {
        self.mass * ATOMIC_MASS_UNIT
    }

    /// Multiply charged ions do not fluoresce on the cooling transition.
    pub fn is_dark(&self) -> bool {
        self.charge_number > 1
    }
}

impl fmt::Display for IonSpecies {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}q{}", self.mass, self.charge_number)
    }
}

/// Secular angular frequencies (rad/s) of one species.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeciesFrequencies {
    pub omega_x: f64,
    pub omega_y: f64,
    pub omega_z: f64,
}

impl SpeciesFrequencies {
    pub fn new(omega_x: f64, omega_y: f64, omega_z: f64) -> Self {
        SpeciesFrequencies { omega_x, omega_y, omega_z }
    }

    /// Build from ordinary frequencies in kHz.
    pub fn from_khz(fx: f64, fy: f64, fz: f64) -> Self {
        use crate::constants::khz;
        SpeciesFrequencies::new(khz(fx), khz(fy), khz(fz))
    }

    pub fn on_axis(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.omega_x,
            Axis::Y => self.omega_y,
            Axis::Z => self.omega_z,
        }
    }
}

/// Per-term decomposition of a squared radial frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialTerms {
    /// `2 (qγ/(MΩ))²`, scales as `q²` at fixed mass.
    pub dynamic: f64,
    /// `−2 qβ/M`, scales as `q`.
    pub axial_static: f64,
    /// `∓2 qβ_rad/M`, scales as `q`.
    pub radial_static: f64,
}

impl RadialTerms {
    pub fn total(&self) -> f64 {
        self.dynamic + self.axial_static + self.radial_static
    }
}

/// Pseudopotential trap. All curvatures in V/m², `rf_frequency` in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapModel {
    pub rf_frequency: f64,
    pub axial_static_curvature: f64,
    pub rf_curvature: f64,
    pub radial_static_curvature: f64,
}

impl TrapModel {
    pub fn new(
        rf_frequency: f64,
        axial_static_curvature: f64,
        rf_curvature: f64,
        radial_static_curvature: f64,
    ) -> Result<Self> {
        let trap = TrapModel {
            rf_frequency,
            axial_static_curvature,
            rf_curvature,
            radial_static_curvature,
        };
        trap.check()?;
        Ok(trap)
    }

    fn check(&self) -> Result<()> {
        if !(self.rf_frequency.is_finite() && self.rf_frequency > 0.0) {
            return Err(Error::InvalidInput("rf frequency must be positive".into()));
        }
        if !(self.axial_static_curvature.is_finite() && self.axial_static_curvature > 0.0) {
            return Err(Error::InvalidInput("axial static curvature must be positive".into()));
        }
        if !(self.rf_curvature.is_finite() && self.radial_static_curvature.is_finite()) {
            return Err(Error::InvalidInput("curvatures must be finite".into()));
        }
        Ok(())
    }

    /// `(qγ/(MΩ))²`, `qβ/M`, `qβ_rad/M` for a species.
    fn reduced(&self, s: &IonSpecies) -> (f64, f64, f64) {
        let q_over_m = s.charge_si() / s.mass_si();
        let dynamic = (q_over_m * self.rf_curvature / self.rf_frequency).powi(2);
        (
            dynamic,
            q_over_m * self.axial_static_curvature,
            q_over_m * self.radial_static_curvature,
        )
    }

    /// Term decomposition of `ω_axis²` for `Axis::X` or `Axis::Y`.
    pub fn radial_terms(&self, s: &IonSpecies, axis: Axis) -> RadialTerms {
        let (g, b, r) = self.reduced(s);
        let sign = match axis {
            Axis::X => -1.0,
            Axis::Y => 1.0,
            Axis::Z => panic!("radial_terms called with the axial direction"),
        };
        RadialTerms {
            dynamic: 2.0 * g,
            axial_static: -2.0 * b,
            radial_static: sign * 2.0 * r,
        }
    }

    /// Squared secular frequencies `(ω_x², ω_y², ω_z²)`; may be non-positive.
    pub fn squared_frequencies(&self, s: &IonSpecies) -> [f64; 3] {
        let (g, b, r) = self.reduced(s);
        [2.0 * (g - b - r), 2.0 * (g - b + r), 4.0 * b]
    }

    /// Secular frequencies of `s` in this trap.
    pub fn frequencies_for_species(&self, s: &IonSpecies) -> Result<SpeciesFrequencies> {
        self.check()?;
        let sq = self.squared_frequencies(s);
        for axis in Axis::ALL {
            let w2 = sq[axis.index()];
            if !(w2 > 0.0) {
                return Err(Error::UnstableTrap {
                    species: s.to_string(),
                    axis,
                    omega_squared: w2,
                });
            }
        }
        Ok(SpeciesFrequencies::new(sq[0].sqrt(), sq[1].sqrt(), sq[2].sqrt()))
    }

    /// Derive the trap from the measured secular frequencies of a reference
    /// species. Closed-form inversion of the frequency relations.
    pub fn calibrate_from_frequencies(
        reference: &IonSpecies,
        f: &SpeciesFrequencies,
        rf_frequency: f64,
    ) -> Result<Self> {
        let SpeciesFrequencies { omega_x, omega_y, omega_z } = *f;
        for (name, w) in [("omega_x", omega_x), ("omega_y", omega_y), ("omega_z", omega_z)] {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Inversion(format!("{name} must be positive, got {w}")));
            }
        }
        if omega_x > omega_y {
            return Err(Error::Inversion(format!(
                "omega_x ({omega_x:e}) exceeds omega_y ({omega_y:e}); x must be the soft radial axis"
            )));
        }
        if !(rf_frequency.is_finite() && rf_frequency > 0.0) {
            return Err(Error::Inversion("rf frequency must be positive".into()));
        }
        let m_over_q = reference.mass_si() / reference.charge_si();
        let (wx2, wy2, wz2) = (omega_x * omega_x, omega_y * omega_y, omega_z * omega_z);
        let b = wz2 / 4.0;
        let r = (wy2 - wx2) / 4.0;
        let g = (wx2 + wy2 + wz2) / 4.0;
        Ok(TrapModel {
            rf_frequency,
            axial_static_curvature: b * m_over_q,
            rf_curvature: g.sqrt() * m_over_q * rf_frequency,
            radial_static_curvature: r * m_over_q,
        })
    }

    /// Same static potentials, rf curvature chosen so that `reference` has
    /// the anisotropy `alpha_x` on the soft axis.
    pub fn with_anisotropy(&self, reference: &IonSpecies, alpha_x: f64) -> Result<Self> {
        if !(alpha_x.is_finite() && alpha_x > 0.0) {
            return Err(Error::InvalidInput(format!("alpha_x must be positive, got {alpha_x}")));
        }
        let (_, b, r) = self.reduced(reference);
        let wz2 = 4.0 * b;
        let wx2 = wz2 / alpha_x;
        let g = wx2 / 2.0 + b + r;
        let m_over_q = reference.mass_si() / reference.charge_si();
        Ok(TrapModel {
            rf_curvature: g.sqrt() * m_over_q * self.rf_frequency,
            ..*self
        })
    }
}

/// Anisotropy parameters `(α_x, α_y) = (ω_z²/ω_x², ω_z²/ω_y²)`.
pub fn anisotropy(f: &SpeciesFrequencies) -> (f64, f64) {
    let wz2 = f.omega_z * f.omega_z;
    (wz2 / (f.omega_x * f.omega_x), wz2 / (f.omega_y * f.omega_y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{khz, mhz, to_khz};

    fn reference_trap() -> TrapModel {
        TrapModel::calibrate_from_frequencies(
            &IonSpecies::CA40_PLUS,
            &SpeciesFrequencies::from_khz(480.0, 630.0, 119.0),
            mhz(10.66),
        )
        .unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn calibration_round_trip() {
        let f = reference_trap().frequencies_for_species(&IonSpecies::CA40_PLUS).unwrap();
        assert!(rel(f.omega_x, khz(480.0)) < 1e-12);
        assert!(rel(f.omega_y, khz(630.0)) < 1e-12);
        assert!(rel(f.omega_z, khz(119.0)) < 1e-12);
    }

    #[test]
    fn doubly_charged_frequencies() {
        let f = reference_trap().frequencies_for_species(&IonSpecies::CA40_2PLUS).unwrap();
        assert!(rel(to_khz(f.omega_z), 119.0 * 2f64.sqrt()) < 1e-12);
        assert!((to_khz(f.omega_z) - 168.3).abs() < 0.05);
        // eliminating the curvatures by hand
        let wx = (3.0 * 480f64.powi(2) + 630f64.powi(2) + 119f64.powi(2)).sqrt();
        let wy = (3.0 * 630f64.powi(2) + 480f64.powi(2) + 119f64.powi(2)).sqrt();
        assert!(rel(to_khz(f.omega_x), wx) < 1e-12);
        assert!(rel(to_khz(f.omega_y), wy) < 1e-12);
        assert!((wx - 1049.9).abs() < 0.05);
        assert!((wy - 1198.0).abs() < 0.05);
    }

    #[test]
    fn degenerate_radial_gives_zero_radial_curvature() {
        let t = TrapModel::calibrate_from_frequencies(
            &IonSpecies::CA40_PLUS,
            &SpeciesFrequencies::from_khz(500.0, 500.0, 119.0),
            mhz(10.66),
        )
        .unwrap();
        assert_eq!(t.radial_static_curvature, 0.0);
    }

    #[test]
    fn inverted_radial_order_is_rejected() {
        let err = TrapModel::calibrate_from_frequencies(
            &IonSpecies::CA40_PLUS,
            &SpeciesFrequencies::from_khz(630.0, 480.0, 119.0),
            mhz(10.66),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Inversion(_)));
    }

    #[test]
    fn anisotropy_values() {
        let (ax, ay) = anisotropy(&SpeciesFrequencies::from_khz(480.0, 630.0, 119.0));
        assert!((ax - 0.06146).abs() < 1e-5);
        assert!((ay - 0.03568).abs() < 1e-5);
        let (ax, _) = anisotropy(&SpeciesFrequencies::from_khz(119.0, 630.0, 119.0));
        assert_eq!(ax, 1.0);
        let (ax, _) = anisotropy(&SpeciesFrequencies::from_khz(1e12, 2e12, 119.0));
        assert!(ax < 1e-19);
    }

    #[test]
    fn instability_reports_axis() {
        let mut t = reference_trap();
        t.rf_curvature *= 0.1;
        match t.frequencies_for_species(&IonSpecies::CA40_PLUS) {
            Err(Error::UnstableTrap { axis, .. }) => assert_eq!(axis, Axis::X),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn charge_scaling_of_terms() {
        let t = reference_trap();
        let one = IonSpecies::CA40_PLUS;
        let two = IonSpecies::CA40_2PLUS;
        let fz1 = t.frequencies_for_species(&one).unwrap().omega_z;
        let fz2 = t.frequencies_for_species(&two).unwrap().omega_z;
        assert!(rel(fz2 / fz1, 2f64.sqrt()) < 1e-14);
        for axis in [Axis::X, Axis::Y] {
            let a = t.radial_terms(&one, axis);
            let b = t.radial_terms(&two, axis);
            assert!(rel(b.dynamic, 4.0 * a.dynamic) < 1e-14);
            assert!(rel(b.axial_static, 2.0 * a.axial_static) < 1e-14);
            assert!(rel(b.radial_static, 2.0 * a.radial_static) < 1e-14);
            let sq = t.squared_frequencies(&two)[axis.index()];
            assert!(rel(b.total(), sq) < 1e-14);
        }
    }

    #[test]
    fn with_anisotropy_keeps_static_potentials() {
        let t = reference_trap();
        let t2 = t.with_anisotropy(&IonSpecies::CA40_PLUS, 0.3).unwrap();
        assert_eq!(t2.axial_static_curvature, t.axial_static_curvature);
        assert_eq!(t2.radial_static_curvature, t.radial_static_curvature);
        let f = t2.frequencies_for_species(&IonSpecies::CA40_PLUS).unwrap();
        assert!(rel(anisotropy(&f).0, 0.3) < 1e-12);
        assert!(rel(f.omega_z, khz(119.0)) < 1e-12);
    }

    #[test]
    fn species_validation() {
        assert!(IonSpecies::new(0, 40.0).is_err());
        assert!(IonSpecies::new(1, 0.0).is_err());
        assert_eq!(IonSpecies::new(2, 40.0).unwrap(), IonSpecies::CA40_2PLUS);
        assert_ne!(IonSpecies::CA40_PLUS, IonSpecies::CA40_2PLUS);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_identity(fx in 150.0..900.0f64, dy in 0.0..400.0f64, fz in 50.0..140.0f64,
                                   mass in 1.0..200.0f64, q in 1u32..4) {
                let s = IonSpecies::new(q, mass).unwrap();
                let f = SpeciesFrequencies::from_khz(fx, fx + dy, fz);
                let t = TrapModel::calibrate_from_frequencies(&s, &f, mhz(10.66)).unwrap();
                let back = t.frequencies_for_species(&s).unwrap();
                prop_assert!(rel(back.omega_x, f.omega_x) < 1e-12);
                prop_assert!(rel(back.omega_y, f.omega_y) < 1e-12);
                prop_assert!(rel(back.omega_z, f.omega_z) < 1e-12);
            }

            #[test]
            fn rf_curvature_stiffens_radially(scale in 1.0001..3.0f64, q in 1u32..4) {
                let t = reference_trap();
                let s = IonSpecies::new(q, 40.0).unwrap();
                let mut stiffer = t;
                stiffer.rf_curvature *= scale;
                let a = t.frequencies_for_species(&s).unwrap();
                let b = stiffer.frequencies_for_species(&s).unwrap();
                prop_assert!(b.omega_x > a.omega_x);
                prop_assert!(b.omega_y > a.omega_y);
            }
        }
    }
}
