//! Nonlinear least squares (Levenberg–Marquardt) and the 1D peak models
//! used for frequency extraction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub params: DVector<f64>,
    pub residual_sum_squares: f64,
    /// `s² (JᵀJ)⁻¹` with `s² = RSS / (n − p)`; `None` if singular.
    pub covariance: Option<DMatrix<f64>>,
    pub iterations: usize,
}

/// Minimize `Σ_k (model(p, k) − y_k)²`. `model` returns the value at sample
/// `k` and its gradient with respect to the parameters.
pub fn levenberg_marquardt<F>(model: F, ys: &[f64], p0: DVector<f64>, max_iterations: usize) -> Option<LeastSquares>
where
    F: Fn(&DVector<f64>, usize) -> (f64, DVector<f64>),
{
    let np = p0.len();
    let n = ys.len();
    if n < np {
        return None;
    }
    let cost_of = |p: &DVector<f64>| -> f64 { (0..n).map(|k| (model(p, k).0 - ys[k]).powi(2)).sum() };
    let normal = |p: &DVector<f64>| {
        let mut jtj = DMatrix::zeros(np, np);
        let mut jtr = DVector::zeros(np);
        for (k, &y) in ys.iter().enumerate() {
            let (v, j) = model(p, k);
            jtj += &j * j.transpose();
            jtr += &j * (y - v);
        }
        (jtj, jtr)
    };

    let mut p = p0;
    let mut cost = cost_of(&p);
    if !cost.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    'outer: for it in 0..max_iterations {
        iterations = it + 1;
        let (jtj, jtr) = normal(&p);
        loop {
            if lambda > 1e12 {
                break 'outer;
            }
            let mut lhs = jtj.clone();
            for k in 0..np {
                lhs[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = lhs.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let c = cost_of(&trial);
            if c.is_finite() && c <= cost {
                let gain = (cost - c) / cost.max(f64::MIN_POSITIVE);
                let small_step = step.amax() <= 1e-14 * p.amax().max(1e-300);
                p = trial;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                if gain < 1e-15 || small_step || cost == 0.0 {
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
        }
    }
    if !p.iter().all(|v| v.is_finite()) {
        return None;
    }
    let (jtj, _) = normal(&p);
    let dof = (n as f64 - np as f64).max(1.0);
    let covariance = jtj.try_inverse().map(|inv| inv * (cost / dof));
    Some(LeastSquares { params: p, residual_sum_squares: cost, covariance, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeakModel {
    /// `B + A exp(−(x−c)²/(2w²))`
    Gaussian,
    /// `B + A / (1 + ((x−c)/w)²)`
    Lorentzian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakParameters {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakFit {
    pub params: PeakParameters,
    /// One-sigma uncertainty of the center from the residual covariance.
    pub center_uncertainty: f64,
    pub residual_sum_squares: f64,
    pub iterations: usize,
}

impl PeakModel {
    /// Value and gradient w.r.t. `(A, c, w, B)`.
    fn eval(self, p: &DVector<f64>, x: f64) -> (f64, DVector<f64>) {
        let (a, c, w, b) = (p[0], p[1], p[2], p[3]);
        let u = (x - c) / w;
        match self {
            PeakModel::Gaussian => {
                let e = (-0.5 * u * u).exp();
                (b + a * e, DVector::from_vec(vec![e, a * e * u / w, a * e * u * u / w, 1.0]))
            }
            PeakModel::Lorentzian => {
                let d = 1.0 / (1.0 + u * u);
                let d2 = d * d;
                (b + a * d, DVector::from_vec(vec![d, 2.0 * a * d2 * u / w, 2.0 * a * d2 * u * u / w, 1.0]))
            }
        }
    }

    pub fn value(self, p: &PeakParameters, x: f64) -> f64 {
        self.eval(&DVector::from_vec(vec![p.amplitude, p.center, p.width, p.offset]), x).0
    }
}

/// Fit a single peak starting from `guess`.
pub fn fit_peak(model: PeakModel, xs: &[f64], ys: &[f64], guess: PeakParameters) -> Option<PeakFit> {
    if xs.len() < 5 || xs.len() != ys.len() {
        return None;
    }
    let p0 = DVector::from_vec(vec![guess.amplitude, guess.center, guess.width, guess.offset]);
    let fit = levenberg_marquardt(|p, k| model.eval(p, xs[k]), ys, p0, 500)?;
    let p = &fit.params;
    Some(PeakFit {
        params: PeakParameters { amplitude: p[0], center: p[1], width: p[2].abs(), offset: p[3] },
        center_uncertainty: fit.covariance.map_or(f64::INFINITY, |c| c[(1, 1)].max(0.0).sqrt()),
        residual_sum_squares: fit.residual_sum_squares,
        iterations: fit.iterations,
    })
}
