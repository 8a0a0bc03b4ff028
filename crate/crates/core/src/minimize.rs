//! Dense BFGS with a backtracking (Armijo) line search.
//!
//! Intended for small, smooth problems (a few tens of variables) where the
//! inverse-Hessian approximation can be stored in full.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the gradient max-norm.
    pub gradient_tolerance: f64,
    /// Largest allowed per-coordinate displacement in one step.
    pub max_step: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Relative size of rounding noise in the objective; below it the line
    /// search accepts steps that reduce the gradient instead.
    pub energy_noise: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iterations: 20_000,
            gradient_tolerance: 1e-12,
            max_step: 0.25,
            armijo: 1e-4,
            max_backtracks: 60,
            energy_noise: 1e-13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the last accepted step.
    pub last_step: f64,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimize `f`, which returns `None` where the objective is undefined
/// (the line search then backtracks).
pub fn bfgs<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Option<BfgsOutcome>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut value, g) = f(x.as_slice())?;
    let mut g = DVector::from_vec(g);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut last_step = f64::INFINITY;
    let mut first_update = true;

    for iter in 0..opts.max_iterations {
        if max_norm(g.as_slice()) < opts.gradient_tolerance {
            return Some(BfgsOutcome {
                x: x.as_slice().to_vec(),
                value,
                gradient: g.as_slice().to_vec(),
                iterations: iter,
                converged: true,
                last_step,
            });
        }

        let mut dir = -(&h_inv * &g);
        let mut slope = dir.dot(&g);
        if !(slope < 0.0) {
            h_inv.fill_with_identity();
            first_update = true;
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        let dir_max = max_norm(dir.as_slice());
        let mut t = if dir_max > opts.max_step { opts.max_step / dir_max } else { 1.0 };

        let g_max = max_norm(g.as_slice());
        let noise = opts.energy_noise * value.abs().max(f64::MIN_POSITIVE);
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + t * &dir;
            if let Some((v, gt)) = f(trial.as_slice()) {
                // Armijo, or within rounding of the objective with a smaller gradient
                let sufficient = v <= value + opts.armijo * t * slope;
                let flat = (v - value).abs() <= noise && max_norm(&gt) < g_max;
                if v.is_finite() && (sufficient || flat) {
                    accepted = Some((trial, v, DVector::from_vec(gt)));
                    break;
                }
            }
            t *= 0.5;
        }

        let Some((x_new, v_new, g_new)) = accepted else {
            if first_update {
                break;
            }
            // stale curvature model; retry along the gradient
            h_inv.fill_with_identity();
            first_update = true;
            continue;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        last_step = max_norm(s.as_slice());
        if sy > 1e-14 * s.norm() * y.norm() {
            if first_update {
                h_inv *= sy / y.dot(&y);
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            h_inv += (rho * rho * yhy + rho) * (&s * s.transpose())
                - rho * (&hy * s.transpose() + &s * hy.transpose());
        }
        x = x_new;
        value = v_new;
        g = g_new;
    }

    let converged = max_norm(g.as_slice()) < opts.gradient_tolerance;
    Some(BfgsOutcome {
        x: x.as_slice().to_vec(),
        value,
        gradient: g.as_slice().to_vec(),
        iterations: opts.max_iterations,
        converged,
        last_step,
    })
}
