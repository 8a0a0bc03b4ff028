//! TOML scenario files.
//!
//! Frequencies are in kHz, the rf drive in MHz, masses in amu and charges in
//! units of the elementary charge. Species are declared once by name and the
//! arrangement refers to them in axial order.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use ioncrystal::constants::{khz, mhz};
use ioncrystal::fit::PeakModel;
use ioncrystal::imaging::ProjectionModel;
use ioncrystal::trap::{Axis, IonSpecies, SpeciesFrequencies, TrapModel};
use serde::Deserialize;
use toml::Spanned;

/// A parse or validation problem, located in the source where possible.
#[derive(Debug)]
pub struct ScenarioError {
    pub message: String,
    pub line: Option<usize>,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub trap: TrapSection,
    pub species: BTreeMap<String, SpeciesSection>,
    pub crystal: CrystalSection,
    #[serde(default)]
    pub equilibrium: EquilibriumSection,
    #[serde(default)]
    pub modes: ModesSection,
    #[serde(default)]
    pub scan: Option<ScanSection>,
    #[serde(default)]
    pub response: Option<ResponseSection>,
    #[serde(default)]
    pub render: RenderSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSection {
    /// Name of the calibration species.
    pub reference: Spanned<String>,
    /// Secular frequencies `(x, y, z)` of the reference species, kHz.
    pub frequencies_khz: [f64; 3],
    pub rf_mhz: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSection {
    pub mass: f64,
    pub charge: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrystalSection {
    pub arrangement: NameList,
}

/// Species names in axial order, with source locations.
type NameList = Spanned<Vec<Spanned<String>>>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumSection {
    /// Independent minimizer starts; one uses the linear seed only.
    #[serde(default)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesSection {
    /// Ion index splitting the chain for localization analysis.
    #[serde(default)]
    pub boundary: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    /// Explicit `α_x` values; alternative to `grid`.
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: Option<GridSection>,
    /// Arrangements to compare; defaults to the crystal arrangement.
    #[serde(default)]
    pub arrangements: Option<Spanned<Vec<NameList>>>,
    /// Also locate the critical anisotropy of every arrangement.
    #[serde(default)]
    pub critical: bool,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseSection {
    #[serde(default = "default_axis")]
    pub axis: Axis,
    /// Drive field amplitude, V/m.
    pub field: f64,
    /// Velocity damping rate `Γ/2π`, kHz.
    pub damping_khz: f64,
    /// Drive frequency grid, kHz.
    pub sweep_khz: GridSection,
    #[serde(default = "default_model")]
    pub model: PeakModel,
    /// Fit a single ion's amplitude instead of the summed signal.
    #[serde(default)]
    pub ion: Option<usize>,
}

fn default_axis() -> Axis {
    Axis::X
}

fn default_model() -> PeakModel {
    PeakModel::Gaussian
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSection {
    #[serde(default)]
    pub projection: Option<ProjectionSection>,
    /// Excite this normal mode (index into the ascending spectrum).
    #[serde(default)]
    pub mode: Option<usize>,
    /// Largest single-ion oscillation amplitude of the excited mode, µm.
    #[serde(default)]
    pub amplitude_um: Option<f64>,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSection {
    pub viewing_angle_deg: Option<f64>,
    pub rotation_deg: Option<f64>,
    pub magnification: Option<f64>,
    pub psf_width_um: Option<f64>,
    pub pixel_pitch_um: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub peak_photons: f64,
    pub background_photons: f64,
}

/// Scenario with species resolved and units converted.
#[derive(Debug)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub reference: IonSpecies,
    pub reference_name: String,
    pub frequencies_khz: [f64; 3],
    pub rf_mhz: f64,
    pub trap: TrapModel,
    pub species: BTreeMap<String, IonSpecies>,
    pub arrangement: Vec<IonSpecies>,
    pub arrangement_names: Vec<String>,
    pub restarts: usize,
    pub boundary: Option<usize>,
    pub scan: Option<Scan>,
    pub response: Option<Response>,
    pub render: Render,
}

#[derive(Debug)]
pub struct Scan {
    pub alphas: Vec<f64>,
    pub arrangements: Vec<(Vec<String>, Vec<IonSpecies>)>,
    pub critical: bool,
    pub tolerance: f64,
}

#[derive(Debug)]
pub struct Response {
    pub axis: Axis,
    pub field: f64,
    /// rad/s
    pub damping: f64,
    /// rad/s
    pub frequencies: Vec<f64>,
    pub model: PeakModel,
    pub ion: Option<usize>,
}

#[derive(Debug)]
pub struct Render {
    pub projection: ProjectionModel,
    pub mode: Option<usize>,
    pub amplitude_um: f64,
    pub noise: Option<NoiseSection>,
}

struct Locator<'a> {
    source: &'a str,
}

impl Locator<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.source[..span.start.min(self.source.len())].matches('\n').count() + 1
    }

    fn error(&self, span: Range<usize>, message: impl Into<String>) -> ScenarioError {
        ScenarioError { message: message.into(), line: Some(self.line(span)) }
    }
}

fn plain(message: impl Into<String>) -> ScenarioError {
    ScenarioError { message: message.into(), line: None }
}

fn grid(g: &GridSection, field: &str) -> Result<Vec<f64>, ScenarioError> {
    if !(g.start.is_finite() && g.stop.is_finite() && g.step.is_finite()) || g.step <= 0.0 || g.stop < g.start {
        return Err(plain(format!("{field}: need finite start <= stop and step > 0")));
    }
    let n = ((g.stop - g.start) / g.step + 1e-9).floor() as usize;
    if n > 1_000_000 {
        return Err(plain(format!("{field}: grid has more than a million points")));
    }
    Ok((0..=n).map(|k| g.start + k as f64 * g.step).collect())
}

pub fn parse(source: &str, seed_override: Option<u64>) -> Result<Scenario, ScenarioError> {
    let file: ScenarioFile = toml::from_str(source).map_err(|e| {
        let line = e.span().map(|s| source[..s.start.min(source.len())].matches('\n').count() + 1);
        ScenarioError { message: e.message().to_string(), line }
    })?;
    let at = Locator { source };

    let mut species = BTreeMap::new();
    for (name, s) in &file.species {
        let ion = IonSpecies::new(s.charge, s.mass).map_err(|e| plain(format!("species.{name}: {e}")))?;
        species.insert(name.clone(), ion);
    }
    let lookup = |name: &Spanned<String>, field: &str| -> Result<IonSpecies, ScenarioError> {
        species
            .get(name.get_ref())
            .copied()
            .ok_or_else(|| at.error(name.span(), format!("{field}: unknown species '{}'", name.get_ref())))
    };
    let resolve = |list: &NameList, field: &str| -> Result<(Vec<String>, Vec<IonSpecies>), ScenarioError> {
        if list.get_ref().is_empty() {
            return Err(at.error(list.span(), format!("{field}: arrangement must not be empty")));
        }
        let ions = list.get_ref().iter().map(|n| lookup(n, field)).collect::<Result<Vec<_>, _>>()?;
        Ok((list.get_ref().iter().map(|n| n.get_ref().clone()).collect(), ions))
    };

    let reference = lookup(&file.trap.reference, "trap.reference")?;
    let [fx, fy, fz] = file.trap.frequencies_khz;
    let trap = TrapModel::calibrate_from_frequencies(&reference, &SpeciesFrequencies::from_khz(fx, fy, fz), mhz(file.trap.rf_mhz))
        .map_err(|e| plain(format!("trap: {e}")))?;
    let (arrangement_names, arrangement) = resolve(&file.crystal.arrangement, "crystal.arrangement")?;

    let boundary = file.modes.boundary;
    if let Some(b) = boundary {
        if b >= arrangement.len() {
            return Err(plain(format!("modes.boundary: index {b} outside the {}-ion arrangement", arrangement.len())));
        }
    }
    let restarts = file.equilibrium.restarts.unwrap_or(1);
    if restarts == 0 {
        return Err(plain("equilibrium.restarts: must be at least 1"));
    }

    let scan = match &file.scan {
        None => None,
        Some(s) => {
            let alphas = match (&s.alphas, &s.grid) {
                (Some(a), None) => a.clone(),
                (None, Some(g)) => grid(g, "scan.grid")?,
                _ => return Err(plain("scan: give exactly one of 'alphas' or 'grid'")),
            };
            if alphas.is_empty() {
                return Err(plain("scan.alphas: must not be empty"));
            }
            let arrangements = match &s.arrangements {
                None => vec![(arrangement_names.clone(), arrangement.clone())],
                Some(list) => {
                    if list.get_ref().is_empty() {
                        return Err(at.error(list.span(), "scan.arrangements: must not be empty"));
                    }
                    list.get_ref().iter().map(|a| resolve(a, "scan.arrangements")).collect::<Result<_, _>>()?
                }
            };
            let tolerance = s.tolerance.unwrap_or(1e-4);
            if !(tolerance > 0.0) {
                return Err(plain("scan.tolerance: must be positive"));
            }
            Some(Scan { alphas, arrangements, critical: s.critical, tolerance })
        }
    };

    let response = match &file.response {
        None => None,
        Some(r) => {
            if let Some(i) = r.ion {
                if i >= arrangement.len() {
                    return Err(plain(format!("response.ion: index {i} outside the arrangement")));
                }
            }
            Some(Response {
                axis: r.axis,
                field: r.field,
                damping: khz(r.damping_khz),
                frequencies: grid(&r.sweep_khz, "response.sweep_khz")?.into_iter().map(khz).collect(),
                model: r.model,
                ion: r.ion,
            })
        }
    };

    let mut projection = ProjectionModel::default();
    if let Some(p) = &file.render.projection {
        projection.viewing_angle_deg = p.viewing_angle_deg.unwrap_or(projection.viewing_angle_deg);
        projection.rotation_deg = p.rotation_deg.unwrap_or(projection.rotation_deg);
        projection.magnification = p.magnification.unwrap_or(projection.magnification);
        projection.psf_width_um = p.psf_width_um.unwrap_or(projection.psf_width_um);
        projection.pixel_pitch_um = p.pixel_pitch_um.unwrap_or(0.25 * projection.magnification);
    }
    projection.validate().map_err(|e| plain(format!("render.projection: {e}")))?;
    if file.render.mode.is_some() != file.render.amplitude_um.is_some() {
        return Err(plain("render: 'mode' and 'amplitude_um' go together"));
    }
    let render = Render {
        projection,
        mode: file.render.mode,
        amplitude_um: file.render.amplitude_um.unwrap_or(0.0),
        noise: file.render.noise,
    };

    Ok(Scenario {
        name: file.name.unwrap_or_else(|| "scenario".into()),
        seed: seed_override.or(file.seed).unwrap_or(0),
        reference,
        reference_name: file.trap.reference.into_inner(),
        frequencies_khz: file.trap.frequencies_khz,
        rf_mhz: file.trap.rf_mhz,
        trap,
        species,
        arrangement,
        arrangement_names,
        restarts,
        boundary,
        scan,
        response,
        render,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[trap]
reference = "ca"
frequencies_khz = [480.0, 630.0, 119.0]
rf_mhz = 10.66

[species.ca]
mass = 40.0
charge = 1

[species.ca2]
mass = 40.0
charge = 2

[crystal]
arrangement = ["ca", "ca2", "ca"]
"#;

    #[test]
    fn minimal_scenario() {
        let s = parse(BASE, None).unwrap();
        assert_eq!(s.arrangement.len(), 3);
        assert_eq!(s.arrangement[1].charge_number(), 2);
        assert_eq!(s.seed, 0);
        assert_eq!(parse(BASE, Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn unknown_species_reports_line() {
        let src = BASE.replace(r#"["ca", "ca2", "ca"]"#, r#"["ca", "sr", "ca"]"#);
        let e = parse(&src, None).unwrap_err();
        assert_eq!(e.line, Some(16));
        assert!(e.message.contains("sr"));
    }

    #[test]
    fn empty_arrangement() {
        let src = BASE.replace(r#"["ca", "ca2", "ca"]"#, "[]");
        let e = parse(&src, None).unwrap_err();
        assert!(e.message.contains("must not be empty"), "{e}");
        assert_eq!(e.line, Some(16));
    }

    #[test]
    fn unknown_field_is_rejected() {
        let src = format!("{BASE}\n[modes]\nboundry = 1\n");
        let e = parse(&src, None).unwrap_err();
        assert!(e.message.contains("boundry"), "{e}");
        assert!(e.line.is_some());
    }

    #[test]
    fn grids() {
        let g = GridSection { start: 1.0, stop: 2.0, step: 0.25 };
        assert_eq!(grid(&g, "g").unwrap(), vec![1.0, 1.25, 1.5, 1.75, 2.0]);
        assert!(grid(&GridSection { start: 1.0, stop: 2.0, step: 0.0 }, "g").is_err());
    }
}
