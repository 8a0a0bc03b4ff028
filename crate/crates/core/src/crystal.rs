//! Equilibrium structures of ion crystals.
//!
//! Each ion feels the harmonic pseudopotential of its own species plus the
//! Coulomb repulsion of all others. Equilibria are found by minimizing the
//! total energy in dimensionless coordinates: lengths in units of the
//! characteristic length `ℓ = (k e² / (M ω_z²))^{1/3}` of the lightest-charge
//! species present, energies in units of `k e² / ℓ`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{COULOMB_CONSTANT, ELEMENTARY_CHARGE};
use crate::error::{Error, Result};
use crate::minimize::{bfgs, BfgsOptions};
use crate::modes;
use crate::potential::Potential;
use crate::trap::{IonSpecies, TrapModel};

/// Pairs of ions closer than this (m) are treated as coincident.
pub const MIN_SEPARATION: f64 = 1e-12;

/// Magnitude (m) of the transverse perturbation added to a linear-chain seed.
pub const LINEAR_SEED_PERTURBATION: f64 = 1e-8;

/// Order parameter threshold for a linear chain, relative to `ℓ`.
pub const LINEARITY_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalConfiguration {
    pub ions: Vec<IonSpecies>,
    /// Lab-frame positions in meters.
    pub positions: Vec<[f64; 3]>,
}

impl CrystalConfiguration {
    pub fn new(ions: Vec<IonSpecies>, positions: Vec<[f64; 3]>) -> Result<Self> {
        if ions.is_empty() {
            return Err(Error::InvalidInput("a crystal needs at least one ion".into()));
        }
        if ions.len() != positions.len() {
            return Err(Error::InvalidInput(format!(
                "{} species but {} positions",
                ions.len(),
                positions.len()
            )));
        }
        let c = CrystalConfiguration { ions, positions };
        c.check_separations()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.ions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ions.is_empty()
    }

    pub fn check_separations(&self) -> Result<()> {
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d: f64 = (0..3)
                    .map(|a| (self.positions[i][a] - self.positions[j][a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if !(d > MIN_SEPARATION) {
                    return Err(Error::CoincidentPositions(i, j));
                }
            }
        }
        Ok(())
    }

    /// Positions flattened to `[x0, y0, z0, x1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.positions.iter().flatten().copied().collect()
    }

    /// Ion indices ordered by increasing `z`.
    pub fn axial_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.positions[a][2].total_cmp(&self.positions[b][2]));
        idx
    }

    /// Mirror image under `x -> -x`, `y -> -y`.
    pub fn mirrored(&self) -> Self {
        CrystalConfiguration {
            ions: self.ions.clone(),
            positions: self.positions.iter().map(|p| [-p[0], -p[1], p[2]]).collect(),
        }
    }
}

/// Characteristic length `(k q² / (M ω_z²))^{1/3}` of one species.
pub fn characteristic_length(trap: &TrapModel, species: &IonSpecies) -> Result<f64> {
    let f = trap.frequencies_for_species(species)?;
    let q = species.charge_si();
    Ok((COULOMB_CONSTANT * q * q / (species.mass_si() * f.omega_z * f.omega_z)).cbrt())
}

/// Length unit for a set of ions: `ℓ` of the first species with the lowest
/// charge number.
pub fn length_scale(trap: &TrapModel, ions: &[IonSpecies]) -> Result<f64> {
    let reference = ions
        .iter()
        .min_by_key(|s| s.charge_number())
        .ok_or_else(|| Error::InvalidInput("empty ion list".into()))?;
    characteristic_length(trap, reference)
}

fn stiffness(trap: &TrapModel, ions: &[IonSpecies]) -> Result<Vec<[f64; 3]>> {
    ions.iter()
        .map(|s| {
            let f = trap.frequencies_for_species(s)?;
            let m = s.mass_si();
            Ok([
                m * f.omega_x * f.omega_x,
                m * f.omega_y * f.omega_y,
                m * f.omega_z * f.omega_z,
            ])
        })
        .collect()
}

/// Potential in SI units (m, J).
pub fn si_potential(trap: &TrapModel, ions: &[IonSpecies]) -> Result<Potential> {
    Ok(Potential {
        stiffness: stiffness(trap, ions)?,
        charges: ions.iter().map(|s| s.charge_number() as f64).collect(),
        coulomb: COULOMB_CONSTANT * ELEMENTARY_CHARGE * ELEMENTARY_CHARGE,
        min_distance: MIN_SEPARATION,
    })
}

/// Potential in units of `ℓ` and `k e² / ℓ`.
fn scaled_potential(trap: &TrapModel, ions: &[IonSpecies], ell: f64) -> Result<Potential> {
    let energy_unit = COULOMB_CONSTANT * ELEMENTARY_CHARGE * ELEMENTARY_CHARGE / ell;
    let k_scale = ell * ell / energy_unit;
    Ok(Potential {
        stiffness: stiffness(trap, ions)?
            .into_iter()
            .map(|k| [k[0] * k_scale, k[1] * k_scale, k[2] * k_scale])
            .collect(),
        charges: ions.iter().map(|s| s.charge_number() as f64).collect(),
        coulomb: 1.0,
        min_distance: MIN_SEPARATION / ell,
    })
}

/// Total energy (J).
pub fn potential_energy(trap: &TrapModel, c: &CrystalConfiguration) -> Result<f64> {
    si_potential(trap, &c.ions)?.energy(&c.flat())
}

/// Analytic gradient of [`potential_energy`] (N), flattened per ion.
pub fn gradient(trap: &TrapModel, c: &CrystalConfiguration) -> Result<Vec<f64>> {
    si_potential(trap, &c.ions)?.gradient(&c.flat())
}

/// `max_i z_i − min_i z_i`.
pub fn crystal_length(c: &CrystalConfiguration) -> f64 {
    let (lo, hi) = c
        .positions
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[2]), hi.max(p[2])));
    hi - lo
}

/// How the minimizer is started.
#[derive(Debug, Clone, PartialEq)]
pub enum SeedPolicy {
    /// Equally spaced chain on the z-axis with small pseudo-random transverse
    /// offsets drawn from `seed`.
    LinearChain { seed: u64 },
    /// Start from the given positions (m).
    Explicit(Vec<[f64; 3]>),
    /// The linear-chain seed plus `restarts - 1` random starts; the lowest
    /// energy stable minimum wins.
    MultiStart { restarts: usize, seed: u64 },
}

impl Default for SeedPolicy {
    fn default() -> Self {
        SeedPolicy::LinearChain { seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Gradient max-norm bound in newtons.
    pub gradient_tolerance: f64,
    /// Gradient max-norm bound in units of `k e² / ℓ²`.
    pub relative_gradient_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            gradient_tolerance: 1e-16,
            relative_gradient_tolerance: 1e-12,
            max_iterations: 20_000,
        }
    }
}

/// A converged stationary point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub configuration: CrystalConfiguration,
    /// Energy in joules.
    pub energy: f64,
    /// Gradient max-norm in newtons.
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Length unit `ℓ` (m) used by the solver and the classifier.
    pub length_scale: f64,
}

impl Equilibrium {
    pub fn classify(&self) -> StructureClass {
        classify(&self.configuration, self.length_scale)
    }

    pub fn length(&self) -> f64 {
        crystal_length(&self.configuration)
    }
}

/// Spacing (in `ℓ`) of the equally spaced seed chain.
fn seed_spacing(n: usize) -> f64 {
    2.018 / (n as f64).powf(0.559)
}

fn linear_seed(n: usize, rng: &mut ChaCha8Rng, perturbation: f64) -> Vec<f64> {
    let s = seed_spacing(n);
    let mid = (n as f64 - 1.0) / 2.0;
    let mut x = Vec::with_capacity(3 * n);
    for i in 0..n {
        x.push(rng.random_range(-perturbation..=perturbation));
        x.push(rng.random_range(-perturbation..=perturbation));
        x.push((i as f64 - mid) * s);
    }
    x
}

fn random_seed(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let half = 0.75 * seed_spacing(n) * (n as f64 - 1.0).max(1.0);
    let mut x = Vec::with_capacity(3 * n);
    for _ in 0..n {
        x.push(rng.random_range(-0.5..0.5));
        x.push(rng.random_range(-0.5..0.5));
        x.push(rng.random_range(-half..half));
    }
    x
}

struct Relaxation<'a> {
    trap: &'a TrapModel,
    ions: &'a [IonSpecies],
    ell: f64,
    scaled: Potential,
    options: &'a SolverOptions,
}

impl<'a> Relaxation<'a> {
    fn new(trap: &'a TrapModel, ions: &'a [IonSpecies], options: &'a SolverOptions) -> Result<Self> {
        if ions.is_empty() {
            return Err(Error::InvalidInput("a crystal needs at least one ion".into()));
        }
        let ell = length_scale(trap, ions)?;
        let scaled = scaled_potential(trap, ions, ell)?;
        Ok(Relaxation { trap, ions, ell, scaled, options })
    }

    fn force_unit(&self) -> f64 {
        COULOMB_CONSTANT * ELEMENTARY_CHARGE * ELEMENTARY_CHARGE / (self.ell * self.ell)
    }

    fn tolerance(&self) -> f64 {
        self.options
            .relative_gradient_tolerance
            .min(self.options.gradient_tolerance / self.force_unit())
    }

    fn bfgs_options(&self) -> BfgsOptions {
        BfgsOptions {
            max_iterations: self.options.max_iterations,
            gradient_tolerance: self.tolerance(),
            ..Default::default()
        }
    }

    /// Full 3D relaxation from a dimensionless start.
    fn relax(&self, start: &[f64]) -> Result<Equilibrium> {
        let pot = &self.scaled;
        let out = bfgs(|x| pot.energy_and_gradient(x).ok(), start, &self.bfgs_options())
            .ok_or_else(|| Error::InvalidInput("seed positions are coincident".into()))?;
        let x = if out.converged { self.polish(out.x, None) } else { out.x };
        self.finish(x, out.converged, out.iterations)
    }

    /// Relaxation restricted to the z-axis.
    fn relax_axial(&self, start: &[f64]) -> Result<Equilibrium> {
        let n = self.ions.len();
        let pot = &self.scaled;
        let z0: Vec<f64> = (0..n).map(|i| start[3 * i + 2]).collect();
        let embed = |z: &[f64]| {
            let mut x = vec![0.0; 3 * n];
            for i in 0..n {
                x[3 * i + 2] = z[i];
            }
            x
        };
        let obj = |z: &[f64]| {
            let (e, g) = pot.energy_and_gradient(&embed(z)).ok()?;
            Some((e, (0..n).map(|i| g[3 * i + 2]).collect()))
        };
        let out = bfgs(obj, &z0, &self.bfgs_options())
            .ok_or_else(|| Error::InvalidInput("seed positions are coincident".into()))?;
        let axial: Vec<usize> = (0..n).map(|i| 3 * i + 2).collect();
        let x = embed(&out.x);
        let x = if out.converged { self.polish(x, Some(&axial)) } else { x };
        self.finish(x, out.converged, out.iterations)
    }

    /// Newton steps on the analytic Hessian, restricted to `coords` if given,
    /// kept only while they shrink the gradient.
    fn polish(&self, mut x: Vec<f64>, coords: Option<&[usize]>) -> Vec<f64> {
        let all: Vec<usize> = (0..x.len()).collect();
        let coords = coords.unwrap_or(&all);
        let gmax = |x: &[f64]| {
            self.scaled
                .gradient(x)
                .ok()
                .map(|g| coords.iter().fold(0.0f64, |m, &k| m.max(g[k].abs())))
        };
        let Some(mut best) = gmax(&x) else { return x };
        for _ in 0..4 {
            let (Ok(g), Ok(h)) = (self.scaled.gradient(&x), self.scaled.hessian(&x)) else { break };
            let m = coords.len();
            let hs = DMatrix::from_fn(m, m, |a, b| h[(coords[a], coords[b])]);
            let gs = DVector::from_fn(m, |a, _| -g[coords[a]]);
            let Some(step) = hs.lu().solve(&gs) else { break };
            let mut trial = x.clone();
            for (a, &k) in coords.iter().enumerate() {
                trial[k] += step[a];
            }
            match gmax(&trial) {
                Some(gt) if gt < best => {
                    best = gt;
                    x = trial;
                }
                _ => break,
            }
        }
        x
    }

    fn finish(&self, x: Vec<f64>, converged: bool, iterations: usize) -> Result<Equilibrium> {
        let positions: Vec<[f64; 3]> = x
            .chunks(3)
            .map(|p| [p[0] * self.ell, p[1] * self.ell, p[2] * self.ell])
            .collect();
        let configuration = CrystalConfiguration::new(self.ions.to_vec(), positions)?;
        let si = si_potential(self.trap, self.ions)?;
        let flat = configuration.flat();
        let g = si.gradient(&flat)?;
        let gradient_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !converged {
            return Err(Error::NonConvergence { iterations, gradient: gradient_norm });
        }
        Ok(Equilibrium {
            energy: si.energy(&flat)?,
            configuration,
            gradient_norm,
            iterations,
            length_scale: self.ell,
        })
    }

    fn relax_stable(&self, start: &[f64]) -> Result<Equilibrium> {
        let eq = self.relax(start)?;
        match modes::negative_mode_count(self.trap, &eq.configuration)? {
            0 => Ok(eq),
            k => Err(Error::SaddlePoint { negative_modes: k }),
        }
    }
}

fn lower_energy_first(a: &Equilibrium, b: &Equilibrium) -> std::cmp::Ordering {
    let scale = a.energy.abs().max(b.energy.abs());
    if (a.energy - b.energy).abs() > 1e-12 * scale {
        return a.energy.total_cmp(&b.energy);
    }
    let (fa, fb) = (a.configuration.flat(), b.configuration.flat());
    for (x, y) in fa.iter().zip(&fb) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

/// Find a stable equilibrium of `ions` in `trap`.
pub fn find_equilibrium(
    trap: &TrapModel,
    ions: &[IonSpecies],
    seed: &SeedPolicy,
) -> Result<Equilibrium> {
    find_equilibrium_with(trap, ions, seed, &SolverOptions::default())
}

pub fn find_equilibrium_with(
    trap: &TrapModel,
    ions: &[IonSpecies],
    seed: &SeedPolicy,
    options: &SolverOptions,
) -> Result<Equilibrium> {
    let relax = Relaxation::new(trap, ions, options)?;
    let n = ions.len();
    match seed {
        SeedPolicy::LinearChain { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let start = linear_seed(n, &mut rng, LINEAR_SEED_PERTURBATION / relax.ell);
            relax.relax_stable(&start)
        }
        SeedPolicy::Explicit(positions) => {
            if positions.len() != n {
                return Err(Error::InvalidInput(format!(
                    "{} seed positions for {} ions",
                    positions.len(),
                    n
                )));
            }
            let start: Vec<f64> = positions.iter().flatten().map(|v| v / relax.ell).collect();
            relax.relax_stable(&start)
        }
        SeedPolicy::MultiStart { restarts, seed } => {
            let restarts = (*restarts).max(1);
            let results: Vec<Result<Equilibrium>> = (0..restarts)
                .into_par_iter()
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                    let start = if k == 0 {
                        linear_seed(n, &mut rng, LINEAR_SEED_PERTURBATION / relax.ell)
                    } else {
                        random_seed(n, &mut rng)
                    };
                    relax.relax_stable(&start)
                })
                .collect();
            let mut first_err = None;
            let mut best: Option<Equilibrium> = None;
            for r in results {
                match r {
                    Ok(eq) => {
                        let better = best
                            .as_ref()
                            .is_none_or(|b| lower_energy_first(&eq, b).is_lt());
                        if better {
                            best = Some(eq);
                        }
                    }
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            best.ok_or_else(|| first_err.expect("at least one restart"))
        }
    }
}

/// Relax from a linear-chain seed and from its mirror image; for a zigzag
/// these are the two degenerate branches.
pub fn find_mirrored_equilibria(
    trap: &TrapModel,
    ions: &[IonSpecies],
    seed: u64,
) -> Result<[Equilibrium; 2]> {
    let options = SolverOptions::default();
    let relax = Relaxation::new(trap, ions, &options)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = linear_seed(ions.len(), &mut rng, LINEAR_SEED_PERTURBATION / relax.ell);
    let mirror: Vec<f64> = start
        .chunks(3)
        .flat_map(|p| [-p[0], -p[1], p[2]])
        .collect();
    Ok([relax.relax_stable(&start)?, relax.relax_stable(&mirror)?])
}

/// Stationary linear chain on the z-axis, whether or not it is stable.
pub fn find_linear_equilibrium(trap: &TrapModel, ions: &[IonSpecies]) -> Result<Equilibrium> {
    let options = SolverOptions::default();
    let relax = Relaxation::new(trap, ions, &options)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let start = linear_seed(ions.len(), &mut rng, 0.0);
    relax.relax_axial(&start)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Linear,
    Zigzag,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructurePlane {
    Xz,
    Yz,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureClass {
    pub kind: StructureKind,
    pub plane: StructurePlane,
    /// Largest distance (m) of any ion from the z-axis.
    pub order_parameter: f64,
}

/// Signs of the displaced ions alternate along the chain.
fn alternates(values: &[f64], threshold: f64) -> bool {
    let signs: Vec<bool> = values
        .iter()
        .filter(|v| v.abs() >= threshold)
        .map(|v| *v > 0.0)
        .collect();
    signs.len() >= 2 && signs.windows(2).all(|w| w[0] != w[1])
}

/// Linear / zigzag / other, with a linearity threshold of
/// [`LINEARITY_THRESHOLD`]` · length_scale`.
pub fn classify(c: &CrystalConfiguration, length_scale: f64) -> StructureClass {
    let threshold = LINEARITY_THRESHOLD * length_scale;
    let order_parameter = c
        .positions
        .iter()
        .map(|p| p[0].hypot(p[1]))
        .fold(0.0, f64::max);
    if order_parameter < threshold {
        return StructureClass {
            kind: StructureKind::Linear,
            plane: StructurePlane::None,
            order_parameter,
        };
    }
    let order = c.axial_order();
    let xs: Vec<f64> = order.iter().map(|&i| c.positions[i][0]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| c.positions[i][1]).collect();
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (kind, plane) = if max_abs(&ys) < threshold && alternates(&xs, threshold) {
        (StructureKind::Zigzag, StructurePlane::Xz)
    } else if max_abs(&xs) < threshold && alternates(&ys, threshold) {
        (StructureKind::Zigzag, StructurePlane::Yz)
    } else {
        (StructureKind::Other, StructurePlane::None)
    };
    StructureClass { kind, plane, order_parameter }
}
