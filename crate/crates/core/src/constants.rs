//! Physical constants (CODATA 2018), SI units.

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;

/// Atomic mass constant, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

/// Vacuum permittivity, F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Coulomb constant 1/(4 pi eps0), N m^2 / C^2.
pub const COULOMB_CONSTANT: f64 = 1.0 / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY);

/// 2 pi, for kHz <-> rad/s conversions.
pub const TWO_PI: f64 = std::f64::consts::TAU;

/// Angular frequency (rad/s) from a frequency in kHz.
pub fn khz(f: f64) -> f64 {
    TWO_PI * f * 1e3
}

/// Frequency in kHz from an angular frequency (rad/s).
pub fn to_khz(omega: f64) -> f64 {
    omega / (TWO_PI * 1e3)
}

/// Angular frequency (rad/s) from a frequency in MHz.
pub fn mhz(f: f64) -> f64 {
    TWO_PI * f * 1e6
}
