//! Driven, damped linear response of a crystal and the frequency-sweep
//! measurement built on it.
//!
//! A uniform field `E cos(ω_d t)` along one radial axis pushes ion `i` with
//! force `q_i E`. In mass-weighted normal coordinates each mode is an
//! independent damped oscillator driven with strength `b_m E`, where
//!
//! ```text
//! b_m = Σ_i q_i / √M_i · e_{m,(i,axis)}
//! ```
//!
//! Modes with `b_m = 0` cannot be excited by the drive at all.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_peak, PeakModel, PeakParameters};
use crate::modes::NormalModeSet;
use crate::trap::Axis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveSpec {
    /// Radial drive axis.
    pub axis: Axis,
    /// Field amplitude (V/m).
    pub field_amplitude: f64,
    /// Velocity damping rate per ion (rad/s).
    pub damping: f64,
    /// Drive angular frequencies (rad/s), strictly increasing.
    pub frequencies: Vec<f64>,
}

impl DriveSpec {
    pub fn validate(&self) -> Result<()> {
        if self.axis == Axis::Z {
            return Err(Error::InvalidInput("drive axis must be x or y".into()));
        }
        if !(self.damping.is_finite() && self.damping > 0.0) {
            return Err(Error::InvalidInput("damping rate must be positive".into()));
        }
        if !self.field_amplitude.is_finite() {
            return Err(Error::InvalidInput("field amplitude must be finite".into()));
        }
        if self.frequencies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("drive frequency grid must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Uniform grid from `start` to `stop` (inclusive) with spacing `step`, rad/s.
    pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
        let n = ((stop - start) / step).round() as usize;
        (0..=n).map(|k| start + k as f64 * step).collect()
    }
}

/// Coupling `b_m` of each mode to a uniform force along `axis` (C/√kg).
pub fn drive_overlap(modes: &NormalModeSet, axis: Axis) -> Vec<f64> {
    let ions = &modes.configuration.ions;
    (0..modes.len())
        .map(|m| {
            ions.iter()
                .enumerate()
                .map(|(i, s)| s.charge_si() / s.mass_si().sqrt() * modes.component(m, i, axis))
                .sum()
        })
        .collect()
}

/// Steady-state amplitude of each mass-weighted normal coordinate (m·√kg).
pub fn modal_amplitudes(modes: &NormalModeSet, drive: &DriveSpec, omega_d: f64) -> Vec<f64> {
    let b = drive_overlap(modes, drive.axis);
    modal_amplitudes_with(&b, modes, drive, omega_d)
}

fn modal_amplitudes_with(b: &[f64], modes: &NormalModeSet, drive: &DriveSpec, omega_d: f64) -> Vec<f64> {
    let e = drive.field_amplitude.abs();
    modes
        .frequencies
        .iter()
        .zip(b)
        .map(|(&w, &bm)| {
            let det = w * w - omega_d * omega_d;
            bm.abs() * e / (det * det + (drive.damping * omega_d).powi(2)).sqrt()
        })
        .collect()
}

/// Per-ion displacement amplitude (m) along the drive axis, summing modal
/// magnitudes.
pub fn steady_state(modes: &NormalModeSet, drive: &DriveSpec, omega_d: f64) -> Vec<f64> {
    let b = drive_overlap(modes, drive.axis);
    steady_state_with(&b, modes, drive, omega_d)
}

fn steady_state_with(b: &[f64], modes: &NormalModeSet, drive: &DriveSpec, omega_d: f64) -> Vec<f64> {
    let a = modal_amplitudes_with(b, modes, drive, omega_d);
    modes
        .configuration
        .ions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let inv_sqrt_m = s.mass_si().sqrt().recip();
            a.iter()
                .enumerate()
                .map(|(m, am)| am * modes.component(m, i, drive.axis).abs() * inv_sqrt_m)
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    /// Drive angular frequencies (rad/s).
    pub frequencies: Vec<f64>,
    /// `amplitudes[k][i]`: amplitude (m) of ion `i` at `frequencies[k]`.
    pub amplitudes: Vec<Vec<f64>>,
}

impl ResponseCurve {
    /// Scalar measurement signal per grid point.
    pub fn signal(&self, which: FitSignal) -> Vec<f64> {
        self.amplitudes
            .iter()
            .map(|row| match which {
                FitSignal::Sum => row.iter().sum(),
                FitSignal::Ion(i) => row[i],
            })
            .collect()
    }
}

pub fn response_curve(modes: &NormalModeSet, drive: &DriveSpec) -> Result<ResponseCurve> {
    drive.validate()?;
    let b = drive_overlap(modes, drive.axis);
    let amplitudes = drive
        .frequencies
        .par_iter()
        .map(|&w| steady_state_with(&b, modes, drive, w))
        .collect();
    Ok(ResponseCurve { frequencies: drive.frequencies.clone(), amplitudes })
}

/// Which amplitude trace the peaks are searched and fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitSignal {
    /// Sum of all ion amplitudes.
    Sum,
    /// A single ion.
    Ion(usize),
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub signal: FitSignal,
    pub model: PeakModel,
    /// Peaks must exceed this multiple of the median signal.
    pub threshold_factor: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { signal: FitSignal::Sum, model: PeakModel::Gaussian, threshold_factor: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedPeak {
    /// Fitted center (rad/s).
    pub center: f64,
    /// One-sigma center uncertainty (rad/s).
    pub center_uncertainty: f64,
    /// Fitted peak height above offset (m).
    pub amplitude: f64,
    /// Fitted width parameter (rad/s).
    pub width: f64,
    pub offset: f64,
    /// Grid frequency of the detected local maximum (rad/s).
    pub grid_peak: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Interior local maxima of `signal` above `factor × median`.
pub fn detect_peaks(signal: &[f64], factor: f64) -> Vec<usize> {
    if signal.len() < 3 {
        return Vec::new();
    }
    let floor = factor * median(signal);
    (1..signal.len() - 1)
        .filter(|&k| signal[k] > signal[k - 1] && signal[k] >= signal[k + 1] && signal[k] > floor)
        .collect()
}

/// Sweep the drive, detect resonances, and fit each with the peak model.
pub fn sweep_and_fit(modes: &NormalModeSet, drive: &DriveSpec, options: &SweepOptions) -> Result<Vec<FittedPeak>> {
    let curve = response_curve(modes, drive)?;
    if let FitSignal::Ion(i) = options.signal {
        if i >= modes.configuration.len() {
            return Err(Error::InvalidInput(format!("no ion with index {i}")));
        }
    }
    let signal = curve.signal(options.signal);
    let peaks = detect_peaks(&signal, options.threshold_factor);
    if peaks.is_empty() {
        return Err(Error::NoPeak);
    }
    let freqs = &curve.frequencies;
    peaks.into_iter().map(|k| fit_one(freqs, &signal, k, options.model)).collect()
}

fn fit_one(freqs: &[f64], signal: &[f64], k: usize, model: PeakModel) -> Result<FittedPeak> {
    let peak = signal[k];
    let half = 0.5 * peak;
    let reach = |dir: isize| {
        let mut j = k as isize;
        let mut steps = 0usize;
        loop {
            let next = j + dir;
            if next < 0 || next as usize >= signal.len() {
                break;
            }
            let (cur, nv) = (signal[j as usize], signal[next as usize]);
            if nv > cur || cur < half {
                break;
            }
            j = next;
            steps += 1;
        }
        steps
    };
    let max_side = k.min(signal.len() - 1 - k);
    let h = reach(-1).min(reach(1)).max(3).min(max_side);
    if 2 * h + 1 < 7 {
        return Err(Error::FitNonConvergent { center_guess: freqs[k] });
    }
    let window = (k - h)..=(k + h);
    // conditioned coordinates: grid steps from the peak, amplitude over peak height
    let x0 = freqs[k];
    let dx = (freqs[k + h] - freqs[k - h]) / (2 * h) as f64;
    let xs: Vec<f64> = freqs[window.clone()].iter().map(|f| (f - x0) / dx).collect();
    let ys: Vec<f64> = signal[window].iter().map(|s| s / peak).collect();
    let base = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let guess = PeakParameters {
        amplitude: 1.0 - base,
        center: 0.0,
        width: (h as f64 / 1.5).max(1.0),
        offset: base,
    };
    let fit = fit_peak(model, &xs, &ys, guess).ok_or(Error::FitNonConvergent { center_guess: x0 })?;
    let p = fit.params;
    if !(p.center.abs() <= h as f64) || !(p.amplitude > 0.0) {
        return Err(Error::FitNonConvergent { center_guess: x0 });
    }
    Ok(FittedPeak {
        center: x0 + p.center * dx,
        center_uncertainty: fit.center_uncertainty * dx,
        amplitude: p.amplitude * peak,
        width: p.width * dx,
        offset: p.offset * peak,
        grid_peak: x0,
    })
}
