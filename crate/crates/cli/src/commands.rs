use ioncrystal::constants::to_khz;
use ioncrystal::crystal::{characteristic_length, find_equilibrium, Equilibrium, SeedPolicy};
use ioncrystal::imaging::{fit_positions, project, render, CameraImage, NoiseModel, RenderOptions, Spot};
use ioncrystal::modes::{localization_ratio, min_same_side_gap, mode_side, normal_modes, NormalModeSet};
use ioncrystal::response::{drive_overlap, response_curve, sweep_and_fit, DriveSpec, FitSignal, SweepOptions};
use ioncrystal::scan::{critical_anisotropy_checked, scan_configurations, AnisotropyFamily, PhaseOutcome, ScanOptions};
use ioncrystal::trap::{anisotropy, Axis, IonSpecies};
use ioncrystal::{Error, Result};
use serde_json::{json, Value};

use crate::output::{num, Report, Table};
use crate::scenario::Scenario;

const UM: f64 = 1e6;

fn header(s: &Scenario, command: &str) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(command));
    m.insert("scenario".into(), json!(s.name));
    m.insert("seed".into(), json!(s.seed));
    m.insert(
        "calibration".into(),
        json!({
            "reference": s.reference_name,
            "frequencies_khz": s.frequencies_khz,
            "rf_mhz": s.rf_mhz,
        }),
    );
    m.insert("arrangement".into(), json!(s.arrangement_names));
    m
}

fn label(names: &[String]) -> String {
    names.join("-")
}

fn species_name(s: &Scenario, ion: &IonSpecies) -> String {
    s.species.iter().find(|(_, v)| *v == ion).map(|(k, _)| k.clone()).unwrap_or_else(|| ion.to_string())
}

fn equilibrium(s: &Scenario) -> Result<Equilibrium> {
    let policy = if s.restarts > 1 {
        SeedPolicy::MultiStart { restarts: s.restarts, seed: s.seed }
    } else {
        SeedPolicy::LinearChain { seed: s.seed }
    };
    find_equilibrium(&s.trap, &s.arrangement, &policy)
}

pub fn calibrate(s: &Scenario) -> Result<Report> {
    let mut trap = Table::new("trap", &["parameter", "value", "unit"]);
    let t = &s.trap;
    for (name, value, unit) in [
        ("rf_frequency", t.rf_frequency, "rad/s"),
        ("axial_static_curvature", t.axial_static_curvature, "V/m^2"),
        ("rf_curvature", t.rf_curvature, "V/m^2"),
        ("radial_static_curvature", t.radial_static_curvature, "V/m^2"),
    ] {
        trap.push(vec![name.into(), num(value), unit.into()]);
    }

    let mut species = Table::new(
        "species",
        &["species", "charge", "mass_amu", "omega_x_khz", "omega_y_khz", "omega_z_khz", "alpha_x", "alpha_y", "length_scale_um"],
    );
    let mut records = Vec::new();
    for (name, ion) in &s.species {
        let f = t.frequencies_for_species(ion)?;
        let (ax, ay) = anisotropy(&f);
        let ell = characteristic_length(t, ion)?;
        let khz = [to_khz(f.omega_x), to_khz(f.omega_y), to_khz(f.omega_z)];
        species.push(vec![
            name.clone(),
            ion.charge_number().to_string(),
            num(ion.mass()),
            num(khz[0]),
            num(khz[1]),
            num(khz[2]),
            num(ax),
            num(ay),
            num(ell * UM),
        ]);
        records.push(json!({
            "name": name,
            "charge": ion.charge_number(),
            "mass_amu": ion.mass(),
            "frequencies_khz": khz,
            "anisotropy": [ax, ay],
            "length_scale_um": ell * UM,
        }));
    }

    let mut record = header(s, "calibrate");
    record.insert("trap".into(), json!(t));
    record.insert("species".into(), Value::Array(records));
    Ok(Report { command: "calibrate", tables: vec![species, trap], record: Value::Object(record), files: Vec::new() })
}

fn equilibrium_tables(s: &Scenario, eq: &Equilibrium) -> (Table, Table, Value) {
    let c = &eq.configuration;
    let mut positions = Table::new("positions", &["ion", "species", "charge", "x_um", "y_um", "z_um"]);
    let mut ions = Vec::new();
    for (i, (ion, r)) in c.ions.iter().zip(&c.positions).enumerate() {
        let um = r.map(|v| v * UM);
        positions.push(vec![
            i.to_string(),
            s.arrangement_names[i].clone(),
            ion.charge_number().to_string(),
            num(um[0]),
            num(um[1]),
            num(um[2]),
        ]);
        ions.push(json!({ "species": s.arrangement_names[i], "charge": ion.charge_number(), "position_um": um }));
    }
    let class = eq.classify();
    let mut structure = Table::new(
        "structure",
        &["kind", "plane", "order_parameter_um", "length_um", "energy_j", "gradient_n", "iterations", "length_scale_um"],
    );
    let kind = json!(class.kind).as_str().unwrap_or_default().to_string();
    let plane = json!(class.plane).as_str().unwrap_or_default().to_string();
    structure.push(vec![
        kind.clone(),
        plane.clone(),
        num(class.order_parameter * UM),
        num(eq.length() * UM),
        num(eq.energy),
        num(eq.gradient_norm),
        eq.iterations.to_string(),
        num(eq.length_scale * UM),
    ]);
    let record = json!({
        "ions": ions,
        "structure": {
            "kind": kind,
            "plane": plane,
            "order_parameter_um": class.order_parameter * UM,
            "length_um": eq.length() * UM,
        },
        "energy_j": eq.energy,
        "gradient_n": eq.gradient_norm,
        "iterations": eq.iterations,
        "length_scale_um": eq.length_scale * UM,
    });
    (positions, structure, record)
}

pub fn equilibrium_command(s: &Scenario) -> Result<Report> {
    let eq = equilibrium(s)?;
    let (positions, structure, value) = equilibrium_tables(s, &eq);
    let mut record = header(s, "equilibrium");
    record.insert("equilibrium".into(), value);
    Ok(Report { command: "equilibrium", tables: vec![positions, structure], record: Value::Object(record), files: Vec::new() })
}

fn axis_name(a: ioncrystal::modes::ModeAxis) -> String {
    json!(a).as_str().unwrap_or_default().to_string()
}

pub fn modes_command(s: &Scenario) -> Result<Report> {
    let eq = equilibrium(s)?;
    let modes = normal_modes(&s.trap, &eq.configuration)?;
    let mut spectrum = Table::new(
        "spectrum",
        &["mode", "frequency_khz", "axis", "weight_x", "weight_y", "weight_z", "side", "localization_ratio"],
    );
    let mut eigen = Table::new("eigenvectors", &["mode", "ion", "species", "x", "y", "z"]);
    let mut records = Vec::new();
    for d in modes.descriptors() {
        let (side, ratio) = match s.boundary {
            Some(b) => {
                let side = json!(mode_side(&d, b)?).as_str().unwrap_or_default().to_string();
                (side, num(localization_ratio(&d, b)?))
            }
            None => (String::new(), String::new()),
        };
        spectrum.push(vec![
            d.index.to_string(),
            num(to_khz(d.frequency)),
            axis_name(d.axis),
            num(d.axis_weights[0]),
            num(d.axis_weights[1]),
            num(d.axis_weights[2]),
            side.clone(),
            ratio.clone(),
        ]);
        let mut vectors = Vec::new();
        for i in 0..modes.configuration.len() {
            let v = [modes.component(d.index, i, Axis::X), modes.component(d.index, i, Axis::Y), modes.component(d.index, i, Axis::Z)];
            eigen.push(vec![d.index.to_string(), i.to_string(), s.arrangement_names[i].clone(), num(v[0]), num(v[1]), num(v[2])]);
            vectors.push(v);
        }
        let mut entry = json!({
            "index": d.index,
            "frequency_khz": to_khz(d.frequency),
            "axis": axis_name(d.axis),
            "axis_weights": d.axis_weights,
            "amplitudes": d.amplitudes,
            "eigenvector": vectors,
        });
        if let Some(b) = s.boundary {
            entry["side"] = json!(side);
            entry["localization_ratio"] = json!(localization_ratio(&d, b)?);
        }
        records.push(entry);
    }

    let mut record = header(s, "modes");
    let (_, _, eq_value) = equilibrium_tables(s, &eq);
    record.insert("equilibrium".into(), eq_value);
    record.insert("modes".into(), Value::Array(records));
    record.insert("soft_modes".into(), json!(modes.soft));
    if let Some(b) = s.boundary {
        record.insert("boundary".into(), json!(b));
        let gap = min_same_side_gap(&modes, Some(b)).ok().map(to_khz);
        record.insert("min_same_side_gap_khz".into(), json!(gap));
    } else if let Ok(gap) = min_same_side_gap(&modes, None) {
        record.insert("min_gap_khz".into(), json!(to_khz(gap)));
    }
    Ok(Report { command: "modes", tables: vec![spectrum, eigen], record: Value::Object(record), files: Vec::new() })
}

pub fn scan_command(s: &Scenario) -> Result<Report> {
    let scan = s.scan.as_ref().ok_or_else(|| Error::InvalidInput("scenario has no [scan] section".into()))?;
    let family = AnisotropyFamily::new(s.trap, s.reference);
    let arrangements: Vec<Vec<IonSpecies>> = scan.arrangements.iter().map(|(_, ions)| ions.clone()).collect();
    let labels: Vec<String> = scan.arrangements.iter().map(|(names, _)| label(names)).collect();
    let map = scan_configurations(&family, &arrangements, &scan.alphas, s.seed)?;

    let mut phase = Table::new("phase_map", &["alpha_x", "alpha_y", "arrangement", "kind", "plane", "order_parameter_um", "error"]);
    let mut entries = Vec::new();
    for e in &map.entries {
        let (kind, plane, order, error) = match &e.outcome {
            PhaseOutcome::Class(c) => (
                json!(c.kind).as_str().unwrap_or_default().to_string(),
                json!(c.plane).as_str().unwrap_or_default().to_string(),
                num(c.order_parameter * UM),
                String::new(),
            ),
            PhaseOutcome::Failed(msg) => (String::new(), String::new(), String::new(), msg.clone()),
        };
        phase.push(vec![num(e.alpha_x), num(e.alpha_y), labels[e.arrangement].clone(), kind.clone(), plane.clone(), order.clone(), error.clone()]);
        entries.push(json!({
            "alpha_x": e.alpha_x,
            "alpha_y": if e.alpha_y.is_nan() { Value::Null } else { json!(e.alpha_y) },
            "arrangement": labels[e.arrangement],
            "kind": kind,
            "plane": plane,
            "order_parameter_um": order.parse::<f64>().ok(),
            "error": if error.is_empty() { Value::Null } else { json!(error) },
        }));
    }

    let mut tables = vec![phase];
    let mut record = header(s, "scan");
    record.insert("phase_map".into(), Value::Array(entries));
    record.insert("monotone".into(), json!(map.is_monotone()));
    if scan.critical {
        let options = ScanOptions { tolerance: scan.tolerance, seed: s.seed, ..Default::default() };
        let mut critical = Table::new("critical", &["arrangement", "method", "alpha_crit", "alpha_y"]);
        let mut points = Vec::new();
        for (k, ions) in arrangements.iter().enumerate() {
            for p in critical_anisotropy_checked(&family, ions, &options)? {
                let method = json!(p.method).as_str().unwrap_or_default().to_string();
                critical.push(vec![labels[k].clone(), method.clone(), num(p.alpha_crit), num(p.alpha_y)]);
                points.push(json!({ "arrangement": labels[k], "method": method, "alpha_crit": p.alpha_crit, "alpha_y": p.alpha_y }));
            }
        }
        tables.push(critical);
        record.insert("critical".into(), Value::Array(points));
    }
    Ok(Report { command: "scan", tables, record: Value::Object(record), files: Vec::new() })
}

fn nearest_mode(modes: &NormalModeSet, axis: Axis, overlap: &[f64], omega: f64) -> Option<usize> {
    modes
        .modes_along(axis)
        .into_iter()
        .filter(|d| overlap[d.index] != 0.0)
        .min_by(|a, b| (a.frequency - omega).abs().total_cmp(&(b.frequency - omega).abs()))
        .map(|d| d.index)
}

pub fn response_command(s: &Scenario) -> Result<Report> {
    let r = s.response.as_ref().ok_or_else(|| Error::InvalidInput("scenario has no [response] section".into()))?;
    let eq = equilibrium(s)?;
    let modes = normal_modes(&s.trap, &eq.configuration)?;
    let drive = DriveSpec { axis: r.axis, field_amplitude: r.field, damping: r.damping, frequencies: r.frequencies.clone() };
    let signal = r.ion.map_or(FitSignal::Sum, FitSignal::Ion);
    let curve = response_curve(&modes, &drive)?;
    let peaks = sweep_and_fit(&modes, &drive, &SweepOptions { signal, model: r.model, ..Default::default() })?;
    let overlap = drive_overlap(&modes, r.axis);

    let mut header_cols = vec!["frequency_khz".to_string(), "sum_m".to_string()];
    header_cols.extend((0..modes.configuration.len()).map(|i| format!("ion{i}_m")));
    let cols: Vec<&str> = header_cols.iter().map(String::as_str).collect();
    let mut curve_table = Table::new("curve", &cols);
    let sum = curve.signal(FitSignal::Sum);
    for (k, w) in curve.frequencies.iter().enumerate() {
        let mut row = vec![num(to_khz(*w)), num(sum[k])];
        row.extend(curve.amplitudes[k].iter().map(|a| num(*a)));
        curve_table.push(row);
    }

    let mut peak_table = Table::new(
        "peaks",
        &["peak", "center_khz", "uncertainty_khz", "grid_peak_khz", "width_khz", "amplitude_m", "mode", "mode_frequency_khz", "deviation_khz"],
    );
    let mut peak_records = Vec::new();
    for (k, p) in peaks.iter().enumerate() {
        let m = nearest_mode(&modes, r.axis, &overlap, p.center);
        let mode_f = m.map(|m| modes.frequencies[m]);
        peak_table.push(vec![
            k.to_string(),
            num(to_khz(p.center)),
            num(to_khz(p.center_uncertainty)),
            num(to_khz(p.grid_peak)),
            num(to_khz(p.width)),
            num(p.amplitude),
            m.map(|m| m.to_string()).unwrap_or_default(),
            mode_f.map(|f| num(to_khz(f))).unwrap_or_default(),
            mode_f.map(|f| num(to_khz(p.center - f))).unwrap_or_default(),
        ]);
        peak_records.push(json!({
            "center_khz": to_khz(p.center),
            "uncertainty_khz": to_khz(p.center_uncertainty),
            "grid_peak_khz": to_khz(p.grid_peak),
            "width_khz": to_khz(p.width),
            "amplitude_m": p.amplitude,
            "mode": m,
            "mode_frequency_khz": mode_f.map(to_khz),
        }));
    }

    let mut record = header(s, "response");
    record.insert(
        "drive".into(),
        json!({
            "axis": r.axis,
            "field_v_per_m": r.field,
            "damping_khz": to_khz(r.damping),
            "points": r.frequencies.len(),
            "model": r.model,
            "signal": signal,
        }),
    );
    record.insert("overlaps".into(), json!(overlap));
    record.insert("peaks".into(), Value::Array(peak_records));
    record.insert(
        "curve".into(),
        json!({
            "frequency_khz": curve.frequencies.iter().map(|w| to_khz(*w)).collect::<Vec<_>>(),
            "amplitudes_m": curve.amplitudes,
        }),
    );
    Ok(Report { command: "response", tables: vec![peak_table, curve_table], record: Value::Object(record), files: Vec::new() })
}

pub fn render_command(s: &Scenario) -> Result<Report> {
    let eq = equilibrium(s)?;
    let p = s.render.projection;
    let proj = project(&eq.configuration, &p);
    let n = proj.len();
    let mut amplitudes = vec![[0.0; 2]; n];
    if let Some(m) = s.render.mode {
        let modes = normal_modes(&s.trap, &eq.configuration)?;
        if m >= modes.len() {
            return Err(Error::InvalidInput(format!("render.mode: no mode {m} in a {}-mode spectrum", modes.len())));
        }
        let d: Vec<[f64; 3]> = (0..n).map(|i| modes.physical_displacement(m, i)).collect();
        let largest = d.iter().map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let scale = s.render.amplitude_um / UM / largest;
        for (a, v) in amplitudes.iter_mut().zip(&d) {
            *a = p.project_displacement(v.map(|c| c * scale));
        }
    }
    let spots: Vec<Spot> = proj.iter().zip(&amplitudes).map(|(q, a)| Spot { position: q.position, amplitude: *a, dark: q.dark }).collect();
    let noise = s.render.noise.map(|n| NoiseModel { seed: s.seed, peak_photons: n.peak_photons, background_photons: n.background_photons });
    let img = render(&spots, &p, &RenderOptions { noise, margin_um: 0.0 })?;
    let bright = proj.iter().filter(|q| !q.dark).count();
    let fitted = fit_positions(&img, bright, &p)?;

    let mut positions = Table::new(
        "positions",
        &["ion", "species", "dark", "h_um", "v_um", "fitted_h_um", "fitted_v_um", "residual_um"],
    );
    let mut ions = Vec::new();
    for (i, q) in proj.iter().enumerate() {
        let matched = (!q.dark)
            .then(|| {
                fitted.iter().min_by(|a, b| {
                    dist(a.position, q.position).total_cmp(&dist(b.position, q.position))
                })
            })
            .flatten();
        let name = species_name(s, &eq.configuration.ions[i]);
        positions.push(vec![
            i.to_string(),
            name.clone(),
            q.dark.to_string(),
            num(q.position[0]),
            num(q.position[1]),
            matched.map(|f| num(f.position[0])).unwrap_or_default(),
            matched.map(|f| num(f.position[1])).unwrap_or_default(),
            matched.map(|f| num(dist(f.position, q.position))).unwrap_or_default(),
        ]);
        ions.push(json!({
            "index": i,
            "species": name,
            "dark": q.dark,
            "position_um": q.position,
            "chip_um": p.to_chip(q.position),
            "amplitude_um": amplitudes[i],
            "fitted_um": matched.map(|f| f.position),
        }));
    }

    let truth = ground_truth(&img, &p, &ions);
    let mut sidecar = serde_json::to_string_pretty(&truth).expect("serializable");
    sidecar.push('\n');
    let mut record = header(s, "render");
    record.insert("image".into(), truth);
    Ok(Report {
        command: "render",
        tables: vec![positions],
        record: Value::Object(record),
        files: vec![("image.pgm".into(), img.to_pgm()), ("image.truth.json".into(), sidecar.into_bytes())],
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn ground_truth(img: &CameraImage, p: &ioncrystal::imaging::ProjectionModel, ions: &[Value]) -> Value {
    json!({
        "file": "image.pgm",
        "width": img.width,
        "height": img.height,
        "um_per_pixel": img.um_per_pixel,
        "origin_um": img.origin,
        "pgm_scale": img.pgm_scale(),
        "exposure": img.exposure,
        "projection": p,
        "ions": ions,
    })
}
