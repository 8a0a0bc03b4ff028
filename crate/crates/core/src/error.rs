use thiserror::Error;

use crate::trap::Axis;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad input: malformed parameters or violated preconditions.
    Input,
    /// Solver failures: instability, non-convergence, missing brackets.
    Solver,
    /// Peak detection, curve fitting and image fitting failures.
    Fit,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("trap is unstable for species {species}: squared {axis} frequency is {omega_squared:e} rad^2/s^2")]
    UnstableTrap {
        species: String,
        axis: Axis,
        omega_squared: f64,
    },

    #[error("cannot invert trap frequencies: {0}")]
    Inversion(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("ions {0} and {1} occupy coincident positions")]
    CoincidentPositions(usize, usize),

    #[error("minimizer did not converge after {iterations} iterations (gradient max-norm {gradient:e} N)")]
    NonConvergence { iterations: usize, gradient: f64 },

    #[error("stationary point is a saddle with {negative_modes} negative Hessian eigenvalue(s)")]
    SaddlePoint { negative_modes: usize },

    #[error("configuration is unstable: {negative_modes} negative Hessian eigenvalue(s)")]
    UnstableConfiguration { negative_modes: usize },

    #[error("configuration is not stationary (gradient max-norm {gradient:e} N)")]
    NotStationary { gradient: f64 },

    #[error("boundary index {index} does not split a chain of {len} ions into two non-empty sides")]
    InvalidBoundary { index: usize, len: usize },

    #[error("fewer than two modes on every side of the boundary")]
    TooFewModes,

    #[error("no sign change of the transition indicator in alpha bracket [{lo}, {hi}]")]
    NoSignChange { lo: f64, hi: f64 },

    #[error("soft-mode ({soft_mode}) and order-parameter ({order_parameter}) critical points disagree")]
    MethodDisagreement { soft_mode: f64, order_parameter: f64 },

    #[error("no resonance peak above the noise floor")]
    NoPeak,

    #[error("Gaussian fit did not converge near {center_guess:e} rad/s")]
    FitNonConvergent { center_guess: f64 },

    #[error("expected {expected} bright spots, found {found}")]
    SpotCountMismatch { expected: usize, found: usize },

    #[error("spots {0} and {1} overlap and cannot be resolved")]
    OverlappingSpots(usize, usize),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            InvalidInput(_) | Inversion(_) | InvalidBoundary { .. } | CoincidentPositions(..) => {
                ErrorCategory::Input
            }
            UnstableTrap { .. }
            | NonConvergence { .. }
            | SaddlePoint { .. }
            | UnstableConfiguration { .. }
            | NotStationary { .. }
            | TooFewModes
            | NoSignChange { .. }
            | MethodDisagreement { .. } => ErrorCategory::Solver,
            NoPeak | FitNonConvergent { .. } | SpotCountMismatch { .. } | OverlappingSpots(..) => {
                ErrorCategory::Fit
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
