//! Synthetic camera images of a crystal and centroid fitting.
//!
//! Geometry: the crystal plane is `xz`, the line of sight makes an angle
//! `θ` with the plane normal `y`. Image coordinates `(h, v)` in object-space
//! µm are
//!
//! ```text
//! h0 = s·z,  v0 = s·x + sin θ · y,   s = 1 / cos θ
//! (h, v) = R(φ) (h0, v0)
//! ```
//!
//! so at the default 45° both in-plane axes appear stretched by √2, and `φ`
//! is the in-plane rotation offset. Chip coordinates are object-space times
//! the magnification.

use std::fmt;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::crystal::CrystalConfiguration;
use crate::error::{Error, Result};
use crate::fit::levenberg_marquardt;

const UM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionModel {
    /// Angle between the line of sight and the crystal plane normal, degrees.
    pub viewing_angle_deg: f64,
    /// In-plane rotation of the image, degrees.
    pub rotation_deg: f64,
    pub magnification: f64,
    /// Gaussian σ of the point spread function, object-space µm.
    pub psf_width_um: f64,
    /// Camera pixel size on the chip, µm.
    pub pixel_pitch_um: f64,
}

impl Default for ProjectionModel {
    fn default() -> Self {
        ProjectionModel {
            viewing_angle_deg: 45.0,
            rotation_deg: 3.0,
            magnification: 17.0,
            psf_width_um: 0.9,
            pixel_pitch_um: 0.25 * 17.0,
        }
    }
}

impl ProjectionModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.viewing_angle_deg, self.rotation_deg, self.magnification, self.psf_width_um, self.pixel_pitch_um]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("projection parameters must be finite".into()));
        }
        if self.magnification <= 0.0 {
            return Err(Error::InvalidInput(format!("magnification must be positive, got {}", self.magnification)));
        }
        if self.psf_width_um <= 0.0 {
            return Err(Error::InvalidInput(format!("PSF width must be positive, got {}", self.psf_width_um)));
        }
        if self.pixel_pitch_um <= 0.0 {
            return Err(Error::InvalidInput(format!("pixel pitch must be positive, got {}", self.pixel_pitch_um)));
        }
        if self.viewing_angle_deg.abs() >= 90.0 {
            return Err(Error::InvalidInput("viewing angle must lie in (-90°, 90°)".into()));
        }
        Ok(())
    }

    /// In-plane stretch `1 / cos θ`.
    pub fn stretch(&self) -> f64 {
        1.0 / self.viewing_angle_deg.to_radians().cos()
    }

    /// Object-space sampling, µm per pixel.
    pub fn um_per_pixel(&self) -> f64 {
        self.pixel_pitch_um / self.magnification
    }

    /// Linear part of the projection: a displacement in metres to image-plane µm.
    pub fn project_displacement(&self, d: [f64; 3]) -> [f64; 2] {
        let s = self.stretch();
        let theta = self.viewing_angle_deg.to_radians();
        let h0 = s * d[2] * UM;
        let v0 = (s * d[0] + theta.sin() * d[1]) * UM;
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        [cos * h0 - sin * v0, sin * h0 + cos * v0]
    }

    /// Object-space image coordinates to chip coordinates.
    pub fn to_chip(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.magnification, p[1] * self.magnification]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedIon {
    /// Image-plane position, object-space µm.
    pub position: [f64; 2],
    /// Multiply charged ions do not fluoresce.
    pub dark: bool,
}

pub fn project(c: &CrystalConfiguration, p: &ProjectionModel) -> Vec<ProjectedIon> {
    c.ions
        .iter()
        .zip(&c.positions)
        .map(|(s, &r)| ProjectedIon { position: p.project_displacement(r), dark: s.is_dark() })
        .collect()
}

/// One rendered ion. `amplitude` is the image-plane oscillation amplitude
/// in µm (its direction sets the elongation axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    pub position: [f64; 2],
    pub amplitude: [f64; 2],
    pub dark: bool,
}

impl From<ProjectedIon> for Spot {
    fn from(p: ProjectedIon) -> Self {
        Spot { position: p.position, amplitude: [0.0; 2], dark: p.dark }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub seed: u64,
    /// Mean photon count at the peak of an unbroadened spot.
    pub peak_photons: f64,
    /// Mean background photons per pixel.
    pub background_photons: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderOptions {
    pub noise: Option<NoiseModel>,
    /// Extra border around the outermost spots, µm. Zero picks a default.
    pub margin_um: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraImage {
    pub width: usize,
    pub height: usize,
    /// Row-major; rows run along `v`, columns along `h`.
    pub data: Vec<f64>,
    pub um_per_pixel: f64,
    /// Object-space coordinates of the centre of pixel (0, 0).
    pub origin: [f64; 2],
    pub exposure: String,
}

impl CameraImage {
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> [f64; 2] {
        [self.origin[0] + col as f64 * self.um_per_pixel, self.origin[1] + row as f64 * self.um_per_pixel]
    }

    /// Nearest pixel to an object-space point, if inside the frame.
    pub fn pixel_at(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let c = ((p[0] - self.origin[0]) / self.um_per_pixel).round();
        let r = ((p[1] - self.origin[1]) / self.um_per_pixel).round();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height).then_some((c as usize, r as usize))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Binary 16 bit PGM, scaled so the brightest pixel is 65535.
    pub fn to_pgm(&self) -> Vec<u8> {
        let scale = self.pgm_scale();
        let mut out = format!("P5\n# {}\n{} {}\n65535\n", self.exposure, self.width, self.height).into_bytes();
        out.reserve(2 * self.data.len());
        for &v in &self.data {
            let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        out
    }

    /// Factor from intensity to PGM grey level.
    pub fn pgm_scale(&self) -> f64 {
        let m = self.max();
        if m > 0.0 { 65535.0 / m } else { 1.0 }
    }

    /// Read a binary PGM (8 or 16 bit) written by [`CameraImage::to_pgm`] or elsewhere.
    pub fn from_pgm(bytes: &[u8], um_per_pixel: f64, origin: [f64; 2]) -> Result<CameraImage> {
        let bad = |m: &str| Error::InvalidInput(format!("PGM: {m}"));
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("only binary P5 graymaps are supported"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval == 0 || maxval > 65535 {
            return Err(bad("maxval out of range"));
        }
        pos += 1;
        let bpp = if maxval > 255 { 2 } else { 1 };
        let body = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
        if body.len() < width * height * bpp {
            return Err(bad("pixel data truncated"));
        }
        let data = (0..width * height)
            .map(|k| if bpp == 2 { u16::from_be_bytes([body[2 * k], body[2 * k + 1]]) as f64 } else { body[k] as f64 })
            .collect();
        Ok(CameraImage { width, height, data, um_per_pixel, origin, exposure: "pgm".into() })
    }
}

impl fmt::Display for CameraImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} @ {} µm/px ({})", self.width, self.height, self.um_per_pixel, self.exposure)
    }
}

/// Inverse covariance of a spot: σ_∥² = psf² + |a|² along `a`, psf² across.
fn spot_precision(psf: f64, amplitude: [f64; 2]) -> [f64; 3] {
    let a2 = amplitude[0] * amplitude[0] + amplitude[1] * amplitude[1];
    let p2 = psf * psf;
    if a2 == 0.0 {
        return [1.0 / p2, 0.0, 1.0 / p2];
    }
    let (ux, uy) = (amplitude[0] / a2.sqrt(), amplitude[1] / a2.sqrt());
    let inv_par = 1.0 / (p2 + a2);
    let inv_perp = 1.0 / p2;
    [
        inv_par * ux * ux + inv_perp * uy * uy,
        (inv_par - inv_perp) * ux * uy,
        inv_par * uy * uy + inv_perp * ux * ux,
    ]
}

/// Render fluorescing spots. Peak intensity of each spot is scaled by
/// `psf / σ_∥` so the integrated signal does not depend on the amplitude.
pub fn render(spots: &[Spot], p: &ProjectionModel, options: &RenderOptions) -> Result<CameraImage> {
    p.validate()?;
    let px = p.um_per_pixel();
    let psf = p.psf_width_um;
    let widest = spots
        .iter()
        .map(|s| (psf * psf + s.amplitude[0].powi(2) + s.amplitude[1].powi(2)).sqrt())
        .fold(psf, f64::max);
    let margin = if options.margin_um > 0.0 { options.margin_um } else { (5.0 * widest).max(4.0) };
    let reach = |k: usize| spots.iter().map(|s| s.position[k].abs()).fold(0.0, f64::max) + margin;
    let half_w = (reach(0) / px).ceil() as usize;
    let half_h = (reach(1) / px).ceil() as usize;
    let (width, height) = (2 * half_w + 1, 2 * half_h + 1);
    if width * height > 64_000_000 {
        return Err(Error::InvalidInput(format!("image of {width}x{height} pixels is too large")));
    }
    let origin = [-(half_w as f64) * px, -(half_h as f64) * px];
    let mut data = vec![0.0; width * height];

    for s in spots.iter().filter(|s| !s.dark) {
        let [a, b, c] = spot_precision(psf, s.amplitude);
        let sigma_par = (psf * psf + s.amplitude[0].powi(2) + s.amplitude[1].powi(2)).sqrt();
        let peak = psf / sigma_par;
        let extent = 8.0 * sigma_par;
        let lo = |k: usize, n: usize| (((s.position[k] - extent - origin[k]) / px).floor().max(0.0) as usize).min(n);
        let hi = |k: usize, n: usize| (((s.position[k] + extent - origin[k]) / px).ceil().max(0.0) as usize + 1).min(n);
        for row in lo(1, height)..hi(1, height) {
            let dv = origin[1] + row as f64 * px - s.position[1];
            for col in lo(0, width)..hi(0, width) {
                let dh = origin[0] + col as f64 * px - s.position[0];
                let q = a * dh * dh + 2.0 * b * dh * dv + c * dv * dv;
                data[row * width + col] += peak * (-0.5 * q).exp();
            }
        }
    }

    let exposure = match options.noise {
        None => "noiseless".to_string(),
        Some(noise) => {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            for v in &mut data {
                let mean = noise.peak_photons * *v + noise.background_photons;
                *v = if mean > 0.0 {
                    Poisson::new(mean).map_err(|e| Error::InvalidInput(format!("noise model: {e}")))?.sample(&mut rng)
                } else {
                    0.0
                };
            }
            format!("poisson seed={} peak={} background={}", noise.seed, noise.peak_photons, noise.background_photons)
        }
    };
    Ok(CameraImage { width, height, data, um_per_pixel: px, origin, exposure })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedSpot {
    /// Object-space µm.
    pub position: [f64; 2],
    /// One-sigma uncertainties of `position`.
    pub uncertainty: [f64; 2],
    pub amplitude: f64,
    pub background: f64,
    /// RMS of the fit residual over the fit window, image units.
    pub residual_rms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Separable Gaussian blur with `sigma` in pixels.
fn smooth(img: &CameraImage, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let (c, rr) = if horizontal { ((col + d).clamp(0, w - 1), row) } else { (col, (row + d).clamp(0, h - 1)) };
                    acc += kv * src[(rr * w + c) as usize];
                }
                out[(row * w + col) as usize] = acc / norm;
            }
        }
        out
    };
    pass(&pass(&img.data, true), false)
}

/// Locate `expected` bright spots and fit each with an elliptical 2D
/// Gaussian. Results are ordered by `h`, then `v`.
pub fn fit_positions(img: &CameraImage, expected: usize, p: &ProjectionModel) -> Result<Vec<FittedSpot>> {
    p.validate()?;
    if img.width == 0 || img.height == 0 || img.data.len() != img.width * img.height {
        return Err(Error::SpotCountMismatch { expected, found: 0 });
    }
    let px = img.um_per_pixel;
    let psf_px = p.psf_width_um / px;
    let smoothed = smooth(img, psf_px);
    let bg = median(smoothed.clone());
    let top = smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(top > bg) {
        return Err(Error::SpotCountMismatch { expected, found: 0 });
    }
    let threshold = bg + 0.1 * (top - bg);

    let nms = (2.0 * psf_px).ceil() as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut peaks: Vec<(f64, usize, usize)> = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let v = smoothed[(row * w + col) as usize];
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'n: for dr in -nms..=nms {
                for dc in -nms..=nms {
                    let (r2, c2) = (row + dr, col + dc);
                    if (dr, dc) == (0, 0) || r2 < 0 || c2 < 0 || r2 >= h || c2 >= w {
                        continue;
                    }
                    let u = smoothed[(r2 * w + c2) as usize];
                    // strict on one side so plateaus yield one maximum
                    if u > v || (u == v && (r2, c2) < (row, col)) {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                peaks.push((v, col as usize, row as usize));
            }
        }
    }
    if peaks.len() < expected {
        return Err(Error::SpotCountMismatch { expected, found: peaks.len() });
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    peaks.truncate(expected);

    let centers: Vec<[f64; 2]> = peaks.iter().map(|&(_, c, r)| img.pixel_center(c, r)).collect();
    let mut fitted = Vec::with_capacity(expected);
    for (k, &(_, col, row)) in peaks.iter().enumerate() {
        let nearest = centers
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, c)| ((c[0] - centers[k][0]).powi(2) + (c[1] - centers[k][1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        let radius_um = (0.5 * nearest).min(8.0 * p.psf_width_um).max(2.0 * p.psf_width_um);
        let spot = fit_spot(img, col, row, radius_um, p.psf_width_um, bg).ok_or(Error::FitNonConvergent { center_guess: centers[k][0] })?;
        if ((spot.position[0] - centers[k][0]).powi(2) + (spot.position[1] - centers[k][1]).powi(2)).sqrt() > radius_um {
            return Err(Error::FitNonConvergent { center_guess: centers[k][0] });
        }
        fitted.push(spot);
    }
    for i in 0..fitted.len() {
        for j in i + 1..fitted.len() {
            let d = ((fitted[i].position[0] - fitted[j].position[0]).powi(2) + (fitted[i].position[1] - fitted[j].position[1]).powi(2)).sqrt();
            if d < 2.0 * p.psf_width_um {
                return Err(Error::OverlappingSpots(i, j));
            }
        }
    }
    fitted.sort_by(|a, b| a.position[0].total_cmp(&b.position[0]).then(a.position[1].total_cmp(&b.position[1])));
    Ok(fitted)
}

fn fit_spot(img: &CameraImage, col: usize, row: usize, radius_um: f64, psf: f64, bg: f64) -> Option<FittedSpot> {
    let px = img.um_per_pixel;
    let r = (radius_um / px).ceil() as isize;
    let center = img.pixel_center(col, row);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            let (c2, r2) = (col as isize + dc, row as isize + dr);
            if c2 < 0 || r2 < 0 || c2 >= img.width as isize || r2 >= img.height as isize || dr * dr + dc * dc > r * r {
                continue;
            }
            // local coordinates in psf units keep the normal equations well scaled
            let pc = img.pixel_center(c2 as usize, r2 as usize);
            xs.push([(pc[0] - center[0]) / psf, (pc[1] - center[1]) / psf]);
            ys.push(img.at(c2 as usize, r2 as usize));
        }
    }
    let peak = img.at(col, row);
    // parameters: A, h, v, a, b, c, B with Q = a dh² + 2b dh dv + c dv²
    let p0 = DVector::from_vec(vec![(peak - bg).max(f64::MIN_POSITIVE), 0.0, 0.0, 1.0, 0.0, 1.0, bg]);
    let model = |p: &DVector<f64>, k: usize| {
        let dh = xs[k][0] - p[1];
        let dv = xs[k][1] - p[2];
        let q = p[3] * dh * dh + 2.0 * p[4] * dh * dv + p[5] * dv * dv;
        let e = (-0.5 * q).exp();
        let ae = p[0] * e;
        let grad = DVector::from_vec(vec![
            e,
            ae * (p[3] * dh + p[4] * dv),
            ae * (p[4] * dh + p[5] * dv),
            -0.5 * ae * dh * dh,
            -ae * dh * dv,
            -0.5 * ae * dv * dv,
            1.0,
        ]);
        (p[6] + ae, grad)
    };
    let fit = levenberg_marquardt(model, &ys, p0, 300)?;
    let q = &fit.params;
    if !(q[3] > 0.0 && q[5] > 0.0 && q[3] * q[5] > q[4] * q[4] && q[0] > 0.0) {
        return None;
    }
    let cov = fit.covariance.as_ref();
    let unc = |i: usize| cov.map_or(f64::INFINITY, |c| c[(i, i)].max(0.0).sqrt() * psf);
    Some(FittedSpot {
        position: [center[0] + q[1] * psf, center[1] + q[2] * psf],
        uncertainty: [unc(1), unc(2)],
        amplitude: q[0],
        background: q[6],
        residual_rms: (fit.residual_sum_squares / ys.len() as f64).sqrt(),
    })
}

/// Pair fitted spots with the nearest fluorescing projected ions and return
/// the largest distance, µm.
pub fn max_position_error(fitted: &[FittedSpot], truth: &[ProjectedIon]) -> f64 {
    let bright: Vec<&ProjectedIon> = truth.iter().filter(|t| !t.dark).collect();
    fitted
        .iter()
        .map(|f| {
            bright
                .iter()
                .map(|t| ((f.position[0] - t.position[0]).powi(2) + (f.position[1] - t.position[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::find_linear_equilibrium;
    use crate::trap::{IonSpecies, SpeciesFrequencies, TrapModel};

    fn zero_tilt() -> ProjectionModel {
        ProjectionModel { rotation_deg: 0.0, ..Default::default() }
    }

    fn chain(n: usize, spacing_um: f64) -> CrystalConfiguration {
        let ions = vec![IonSpecies::CA40_PLUS; n];
        let positions = (0..n).map(|i| [0.0, 0.0, (i as f64 - (n - 1) as f64 / 2.0) * spacing_um * 1e-6]).collect();
        CrystalConfiguration::new(ions, positions).unwrap()
    }

    fn three_ion(impurity: Option<usize>) -> CrystalConfiguration {
        let trap = TrapModel::calibrate_from_frequencies(
            &IonSpecies::CA40_PLUS,
            &SpeciesFrequencies::from_khz(480.0, 630.0, 119.0),
            crate::constants::mhz(24.0),
        )
        .unwrap();
        let mut ions = vec![IonSpecies::CA40_PLUS; 3];
        if let Some(i) = impurity {
            ions[i] = IonSpecies::CA40_2PLUS;
        }
        find_linear_equilibrium(&trap, &ions).unwrap().configuration
    }

    #[test]
    fn origin_maps_to_center() {
        let p = ProjectionModel::default();
        let c = chain(1, 0.0);
        let proj = project(&c, &p);
        assert_eq!(proj[0].position, [0.0, 0.0]);
        let img = render(&[proj[0].into()], &p, &RenderOptions::default()).unwrap();
        assert_eq!(img.pixel_at([0.0, 0.0]), Some((img.width / 2, img.height / 2)));
    }

    #[test]
    fn axial_separation_is_stretched() {
        let proj = project(&chain(2, 10.0), &zero_tilt());
        let d = proj[1].position[0] - proj[0].position[0];
        assert!((d - 10.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!(proj[0].position[1].abs() < 1e-12);
        let radial = zero_tilt().project_displacement([10e-6, 0.0, 0.0]);
        assert!((radial[1] - 10.0 * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn tilt_rotates_chain_axis() {
        let proj = project(&chain(4, 12.0), &ProjectionModel::default());
        let a = proj[0].position;
        let b = proj[3].position;
        let angle = (b[1] - a[1]).atan2(b[0] - a[0]).to_degrees();
        assert!((angle - 3.0).abs() < 1e-12);
    }

    #[test]
    fn projection_is_linear() {
        let p = ProjectionModel::default();
        let c = three_ion(Some(0));
        let scaled = CrystalConfiguration::new(c.ions.clone(), c.positions.iter().map(|r| r.map(|v| 2.5 * v)).collect()).unwrap();
        for (a, b) in project(&c, &p).iter().zip(project(&scaled, &p)) {
            for k in 0..2 {
                assert!((2.5 * a.position[k] - b.position[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dark_count_matches_charges() {
        let c = three_ion(Some(1));
        let proj = project(&c, &ProjectionModel::default());
        assert_eq!(proj.iter().filter(|p| p.dark).count(), 1);
        assert!(proj[1].dark);
    }

    fn second_moments(img: &CameraImage, c: [f64; 2]) -> [f64; 3] {
        let (mut s, mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0, 0.0);
        for row in 0..img.height {
            for col in 0..img.width {
                let v = img.at(col, row);
                let q = img.pixel_center(col, row);
                let (dx, dy) = (q[0] - c[0], q[1] - c[1]);
                s += v;
                xx += v * dx * dx;
                xy += v * dx * dy;
                yy += v * dy * dy;
            }
        }
        [xx / s, xy / s, yy / s]
    }

    #[test]
    fn isotropic_spot_has_psf_width() {
        let p = ProjectionModel::default();
        let img = render(&[Spot { position: [0.0; 2], amplitude: [0.0; 2], dark: false }], &p, &RenderOptions::default()).unwrap();
        let m = second_moments(&img, [0.0; 2]);
        assert!((m[0].sqrt() - 0.9).abs() < 1e-3 && (m[2].sqrt() - 0.9).abs() < 1e-3);
        assert!(m[1].abs() < 1e-9);
        assert!((img.max() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oscillation_broadens_along_its_direction() {
        let p = ProjectionModel::default();
        let dir = p.project_displacement([1e-6, 0.0, 0.0]);
        let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let u = [dir[0] / norm, dir[1] / norm];
        let spot = Spot { position: [0.0; 2], amplitude: [5.0 * u[0], 5.0 * u[1]], dark: false };
        let img = render(&[spot], &p, &RenderOptions::default()).unwrap();
        let [xx, xy, yy] = second_moments(&img, [0.0; 2]);
        let par = u[0] * u[0] * xx + 2.0 * u[0] * u[1] * xy + u[1] * u[1] * yy;
        let perp = u[1] * u[1] * xx - 2.0 * u[0] * u[1] * xy + u[0] * u[0] * yy;
        assert!((par.sqrt() - (0.81f64 + 25.0).sqrt()).abs() < 1e-3);
        assert!((perp.sqrt() - 0.9).abs() < 1e-3);
    }

    #[test]
    fn dark_gap_at_impurity() {
        let p = ProjectionModel::default();
        let proj = project(&three_ion(Some(1)), &p);
        let spots: Vec<Spot> = proj.iter().map(|&q| q.into()).collect();
        let img = render(&spots, &p, &RenderOptions::default()).unwrap();
        let value = |q: ProjectedIon| {
            let (c, r) = img.pixel_at(q.position).unwrap();
            img.at(c, r)
        };
        assert!(value(proj[1]) < 1e-6);
        assert!(value(proj[0]) > 0.9 && value(proj[2]) > 0.9);
    }

    #[test]
    fn noiseless_round_trip() {
        let p = ProjectionModel::default();
        for impurity in [None, Some(0)] {
            let proj = project(&three_ion(impurity), &p);
            let spots: Vec<Spot> = proj.iter().map(|&q| q.into()).collect();
            let img = render(&spots, &p, &RenderOptions::default()).unwrap();
            let bright = proj.iter().filter(|q| !q.dark).count();
            let fitted = fit_positions(&img, bright, &p).unwrap();
            assert_eq!(fitted.len(), bright);
            let err = max_position_error(&fitted, &proj);
            assert!(err < 0.05, "residual {err}");
        }
    }

    #[test]
    fn noisy_round_trip_is_deterministic() {
        let p = ProjectionModel::default();
        let proj = project(&three_ion(None), &p);
        let spots: Vec<Spot> = proj.iter().map(|&q| q.into()).collect();
        let options = RenderOptions { noise: Some(NoiseModel { seed: 7, peak_photons: 40.0, background_photons: 4.0 }), margin_um: 0.0 };
        let img = render(&spots, &p, &options).unwrap();
        assert_eq!(img, render(&spots, &p, &options).unwrap());
        let fitted = fit_positions(&img, 3, &p).unwrap();
        assert!(max_position_error(&fitted, &proj) < 1.0);
    }

    #[test]
    fn empty_image_is_count_mismatch() {
        let p = ProjectionModel::default();
        let img = render(&[], &p, &RenderOptions::default()).unwrap();
        assert!(matches!(fit_positions(&img, 3, &p), Err(Error::SpotCountMismatch { expected: 3, found: 0 })));
    }

    #[test]
    fn too_few_spots() {
        let p = ProjectionModel::default();
        let proj = project(&three_ion(Some(2)), &p);
        let spots: Vec<Spot> = proj.iter().map(|&q| q.into()).collect();
        let img = render(&spots, &p, &RenderOptions::default()).unwrap();
        assert!(matches!(fit_positions(&img, 3, &p), Err(Error::SpotCountMismatch { expected: 3, found: 2 })));
    }

    #[test]
    fn unresolved_pair_is_rejected() {
        let p = ProjectionModel::default();
        let spots = [
            Spot { position: [0.0, 0.0], amplitude: [0.0; 2], dark: false },
            Spot { position: [1.0, 0.0], amplitude: [0.0; 2], dark: false },
        ];
        let img = render(&spots, &p, &RenderOptions::default()).unwrap();
        assert!(fit_positions(&img, 2, &p).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let p = ProjectionModel::default();
        let img = render(&[Spot { position: [1.0, -2.0], amplitude: [0.0; 2], dark: false }], &p, &RenderOptions::default()).unwrap();
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n"));
        let back = CameraImage::from_pgm(&bytes, img.um_per_pixel, img.origin).unwrap();
        assert_eq!((back.width, back.height), (img.width, img.height));
        let scale = img.pgm_scale();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a * scale - b).abs() <= 0.5);
        }
        assert!(CameraImage::from_pgm(b"P2\n1 1\n255\n0", 1.0, [0.0; 2]).is_err());
    }

    #[test]
    fn invalid_projection() {
        let p = ProjectionModel { magnification: 0.0, ..Default::default() };
        assert!(render(&[], &p, &RenderOptions::default()).is_err());
        let p = ProjectionModel { psf_width_um: -1.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
