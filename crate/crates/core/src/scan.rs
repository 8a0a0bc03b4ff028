//! Linear ↔ zigzag transition as a function of trap anisotropy.
//!
//! Anisotropy is changed the way it is in the lab: the rf curvature is
//! scaled while both static curvatures stay fixed, so `α_y` moves together
//! with `α_x`. All `α` values refer to the reference (singly charged)
//! species.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{COULOMB_CONSTANT, ELEMENTARY_CHARGE};
use crate::crystal::{
    classify, find_equilibrium, find_linear_equilibrium, gradient, length_scale,
    CrystalConfiguration, SeedPolicy, StructureClass, StructureKind, StructurePlane,
};
use crate::error::{Error, Result};
use crate::modes::{mass_weighted_hessian, negative_mode_count};
use crate::trap::{anisotropy, IonSpecies, TrapModel};

/// A one-parameter family of traps sharing static potentials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyFamily {
    pub base: TrapModel,
    pub reference: IonSpecies,
}

impl AnisotropyFamily {
    pub fn new(base: TrapModel, reference: IonSpecies) -> Self {
        AnisotropyFamily { base, reference }
    }

    pub fn trap_at(&self, alpha_x: f64) -> Result<TrapModel> {
        self.base.with_anisotropy(&self.reference, alpha_x)
    }

    /// `(α_x, α_y)` of the reference species at a given `α_x`.
    pub fn anisotropies(&self, alpha_x: f64) -> Result<(f64, f64)> {
        let f = self.trap_at(alpha_x)?.frequencies_for_species(&self.reference)?;
        Ok(anisotropy(&f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMethod {
    /// Lowest x-transverse eigenvalue of the linear chain crosses zero.
    SoftMode,
    /// Order parameter of the relaxed crystal crosses the linearity threshold.
    OrderParameter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub alpha_crit: f64,
    /// `α_y` of the reference species at the critical point.
    pub alpha_y: f64,
    pub method: DetectionMethod,
    pub arrangement: Vec<IonSpecies>,
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub bracket: (f64, f64),
    pub tolerance: f64,
    /// Upper limit when the bracket has to be widened.
    pub max_alpha: f64,
    pub seed: u64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions { bracket: (0.05, 0.95), tolerance: 1e-4, max_alpha: 10.0, seed: 0 }
    }
}

/// Lowest eigenvalue (s⁻²) of the x-transverse block of the mass-weighted
/// Hessian at the linear chain.
pub fn linear_soft_mode(trap: &TrapModel, ions: &[IonSpecies]) -> Result<f64> {
    let lin = find_linear_equilibrium(trap, ions)?;
    let d = mass_weighted_hessian(trap, &lin.configuration)?;
    let n = ions.len();
    let block = DMatrix::from_fn(n, n, |i, j| d[(3 * i, 3 * j)]);
    Ok(block.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min))
}

/// `true` once the chain has buckled at this anisotropy.
fn buckled(family: &AnisotropyFamily, ions: &[IonSpecies], alpha: f64, method: DetectionMethod, seed: u64) -> Result<bool> {
    let trap = family.trap_at(alpha)?;
    match method {
        DetectionMethod::SoftMode => Ok(linear_soft_mode(&trap, ions)? < 0.0),
        DetectionMethod::OrderParameter => {
            let eq = find_equilibrium(&trap, ions, &SeedPolicy::LinearChain { seed })?;
            Ok(eq.classify().kind != StructureKind::Linear)
        }
    }
}

/// Locate the critical `α_x` by bisection.
pub fn critical_anisotropy(
    family: &AnisotropyFamily,
    ions: &[IonSpecies],
    method: DetectionMethod,
    options: &ScanOptions,
) -> Result<CriticalPoint> {
    let (mut lo, mut hi) = options.bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidInput(format!("invalid alpha bracket [{lo}, {hi}]")));
    }
    let test = |a: f64| buckled(family, ions, a, method, options.seed);

    while test(lo)? {
        if lo < 1e-3 {
            return Err(Error::NoSignChange { lo, hi });
        }
        lo /= 2.0;
    }
    while !test(hi)? {
        if hi >= options.max_alpha {
            return Err(Error::NoSignChange { lo, hi });
        }
        hi = (hi * 1.5).min(options.max_alpha);
    }
    while hi - lo > options.tolerance {
        let mid = 0.5 * (lo + hi);
        if test(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let alpha_crit = 0.5 * (lo + hi);
    Ok(CriticalPoint {
        alpha_crit,
        alpha_y: family.anisotropies(alpha_crit)?.1,
        method,
        arrangement: ions.to_vec(),
    })
}

/// Both detection methods; fails if they differ by more than ten times the
/// bisection tolerance. Returns `[soft_mode, order_parameter]`.
pub fn critical_anisotropy_checked(
    family: &AnisotropyFamily,
    ions: &[IonSpecies],
    options: &ScanOptions,
) -> Result<[CriticalPoint; 2]> {
    let soft = critical_anisotropy(family, ions, DetectionMethod::SoftMode, options)?;
    let order = critical_anisotropy(family, ions, DetectionMethod::OrderParameter, options)?;
    if (soft.alpha_crit - order.alpha_crit).abs() > 10.0 * options.tolerance {
        return Err(Error::MethodDisagreement {
            soft_mode: soft.alpha_crit,
            order_parameter: order.alpha_crit,
        });
    }
    Ok([soft, order])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseOutcome {
    Class(StructureClass),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub alpha_x: f64,
    pub alpha_y: f64,
    /// Index into [`PhaseMap::arrangements`].
    pub arrangement: usize,
    pub outcome: PhaseOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    pub alphas: Vec<f64>,
    pub arrangements: Vec<Vec<IonSpecies>>,
    /// Grid-major: all arrangements for `alphas[0]`, then `alphas[1]`, ...
    pub entries: Vec<PhaseEntry>,
}

impl PhaseMap {
    pub fn entry(&self, alpha_index: usize, arrangement: usize) -> &PhaseEntry {
        &self.entries[alpha_index * self.arrangements.len() + arrangement]
    }

    pub fn kind(&self, alpha_index: usize, arrangement: usize) -> Option<StructureKind> {
        match &self.entry(alpha_index, arrangement).outcome {
            PhaseOutcome::Class(c) => Some(c.kind),
            PhaseOutcome::Failed(_) => None,
        }
    }

    /// Once non-linear along increasing `α`, an arrangement never returns to
    /// linear.
    pub fn is_monotone(&self) -> bool {
        (0..self.arrangements.len()).all(|k| {
            let mut buckled = false;
            (0..self.alphas.len()).all(|i| match self.kind(i, k) {
                Some(StructureKind::Linear) => !buckled,
                Some(_) => {
                    buckled = true;
                    true
                }
                None => true,
            })
        })
    }
}

fn classify_point(family: &AnisotropyFamily, ions: &[IonSpecies], alpha: f64, seed: u64) -> Result<(f64, StructureClass)> {
    if alpha == 0.0 {
        // infinitely stiff radial confinement
        return Ok((
            0.0,
            StructureClass { kind: StructureKind::Linear, plane: StructurePlane::None, order_parameter: 0.0 },
        ));
    }
    let trap = family.trap_at(alpha)?;
    let alpha_y = family.anisotropies(alpha)?.1;
    let eq = find_equilibrium(&trap, ions, &SeedPolicy::LinearChain { seed })?;
    Ok((alpha_y, eq.classify()))
}

/// Classify the equilibrium reached from the linear seed for every
/// `(α, arrangement)` pair.
pub fn scan_configurations(
    family: &AnisotropyFamily,
    arrangements: &[Vec<IonSpecies>],
    alphas: &[f64],
    seed: u64,
) -> Result<PhaseMap> {
    if alphas.is_empty() || arrangements.is_empty() {
        return Err(Error::InvalidInput("empty alpha grid or arrangement list".into()));
    }
    if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("alpha grid must be non-negative and strictly increasing".into()));
    }
    if arrangements.iter().any(|a| a.is_empty()) {
        return Err(Error::InvalidInput("empty ion arrangement".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|i| (0..arrangements.len()).map(move |k| (i, k)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(i, k)| {
            let alpha = alphas[i];
            match classify_point(family, &arrangements[k], alpha, seed) {
                Ok((alpha_y, class)) => PhaseEntry { alpha_x: alpha, alpha_y, arrangement: k, outcome: PhaseOutcome::Class(class) },
                Err(e) => PhaseEntry {
                    alpha_x: alpha,
                    alpha_y: f64::NAN,
                    arrangement: k,
                    outcome: PhaseOutcome::Failed(e.to_string()),
                },
            }
        })
        .collect();
    Ok(PhaseMap { alphas: alphas.to_vec(), arrangements: arrangements.to_vec(), entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Saddle(usize),
}

/// Gradient max-norm, relative to `k e² / ℓ²`, below which a configuration
/// counts as stationary.
pub const STATIONARITY_TOLERANCE: f64 = 1e-9;

/// Count negative Hessian eigenvalues at a stationary point.
pub fn configuration_stability(trap: &TrapModel, c: &CrystalConfiguration) -> Result<Stability> {
    let ell = length_scale(trap, &c.ions)?;
    let force_unit = COULOMB_CONSTANT * ELEMENTARY_CHARGE * ELEMENTARY_CHARGE / (ell * ell);
    let g = gradient(trap, c)?;
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if gmax > STATIONARITY_TOLERANCE * force_unit {
        return Err(Error::NotStationary { gradient: gmax });
    }
    Ok(match negative_mode_count(trap, c)? {
        0 => Stability::Stable,
        k => Stability::Saddle(k),
    })
}

/// Classification of an arbitrary configuration with the solver's length
/// scale for `trap`.
pub fn classify_in(trap: &TrapModel, c: &CrystalConfiguration) -> Result<StructureClass> {
    Ok(classify(c, length_scale(trap, &c.ions)?))
}
