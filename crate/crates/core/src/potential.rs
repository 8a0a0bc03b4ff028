//! Energy, gradient and Hessian kernels for point charges in an anisotropic
//! harmonic well.
//!
//! ```text
//! E = ½ Σ_i Σ_a κ_{i,a} r_{i,a}²  +  C Σ_{i<j} z_i z_j / |r_i − r_j|
//! ```
//!
//! The same kernel serves SI coordinates (κ = Mω², C = k e², z = charge
//! number) and the dimensionless coordinates used by the minimizer.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Potential {
    /// Per-ion, per-axis spring constants.
    pub stiffness: Vec<[f64; 3]>,
    /// Per-ion charge numbers.
    pub charges: Vec<f64>,
    /// Coulomb prefactor.
    pub coulomb: f64,
    /// Pairs closer than this are rejected as coincident.
    pub min_distance: f64,
}

impl Potential {
    pub fn len(&self) -> usize {
        self.charges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charges.is_empty()
    }

    fn pair(&self, x: &[f64], i: usize, j: usize) -> Result<([f64; 3], f64)> {
        let d = [
            x[3 * i] - x[3 * j],
            x[3 * i + 1] - x[3 * j + 1],
            x[3 * i + 2] - x[3 * j + 2],
        ];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if !(r > self.min_distance) {
            return Err(Error::CoincidentPositions(i, j));
        }
        Ok((d, r))
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        let n = self.len();
        let mut e = 0.0;
        for i in 0..n {
            for a in 0..3 {
                e += 0.5 * self.stiffness[i][a] * x[3 * i + a] * x[3 * i + a];
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (_, r) = self.pair(x, i, j)?;
                e += self.coulomb * self.charges[i] * self.charges[j] / r;
            }
        }
        Ok(e)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let mut g = vec![0.0; 3 * n];
        for i in 0..n {
            for a in 0..3 {
                g[3 * i + a] = self.stiffness[i][a] * x[3 * i + a];
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (d, r) = self.pair(x, i, j)?;
                let c = self.coulomb * self.charges[i] * self.charges[j] / (r * r * r);
                for a in 0..3 {
                    g[3 * i + a] -= c * d[a];
                    g[3 * j + a] += c * d[a];
                }
            }
        }
        Ok(g)
    }

    pub fn energy_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.energy(x)?, self.gradient(x)?))
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.len();
        let mut h = DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            for a in 0..3 {
                h[(3 * i + a, 3 * i + a)] = self.stiffness[i][a];
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (d, r) = self.pair(x, i, j)?;
                let c = self.coulomb * self.charges[i] * self.charges[j];
                let r2 = r * r;
                let r5 = r2 * r2 * r;
                for a in 0..3 {
                    for b in 0..3 {
                        let delta = if a == b { r2 } else { 0.0 };
                        let k = c * (3.0 * d[a] * d[b] - delta) / r5;
                        h[(3 * i + a, 3 * i + b)] += k;
                        h[(3 * j + a, 3 * j + b)] += k;
                        h[(3 * i + a, 3 * j + b)] -= k;
                        h[(3 * j + a, 3 * i + b)] -= k;
                    }
                }
            }
        }
        Ok(h)
    }
}
