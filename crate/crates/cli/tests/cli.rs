use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ioncrystal"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_scenario(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("s.toml");
    fs::write(&path, body).unwrap();
    path
}

const TRAP: &str = r#"
[trap]
reference = "ca"
frequencies_khz = [480.0, 630.0, 119.0]
rf_mhz = 10.66

[species.ca]
mass = 40.0
charge = 1
"#;

#[test]
fn six_ion_modes_table() {
    let s = scenario("six_ion_impurity.toml");
    let o = run(&["modes", "--scenario", s.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("mode,frequency_khz,axis,"));
    let x: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(2) == Some("x"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let expected = [352.0, 403.0, 423.0, 463.0, 468.0, 1006.0];
    assert_eq!(x.len(), 6);
    for (f, e) in x.iter().zip(expected) {
        assert!((f / e - 1.0).abs() < 0.02, "{f} vs {e}");
    }
}

#[test]
fn scan_shows_three_regimes() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("zigzag_scan.toml");
    let o = run(&["scan", "--scenario", s.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let map = fs::read_to_string(dir.path().join("phase_map.csv")).unwrap();
    let kind = |alpha: &str, arrangement: &str| {
        map.lines()
            .find(|l| l.starts_with(&format!("{alpha},")) && l.split(',').nth(2) == Some(arrangement))
            .and_then(|l| l.split(',').nth(3).map(str::to_string))
            .unwrap()
    };
    // only the outer placement has buckled
    assert_eq!(kind("0.39", "ca2-ca-ca"), "zigzag");
    assert_eq!(kind("0.39", "ca-ca-ca"), "linear");
    // pure joins it, central stays linear
    assert_eq!(kind("0.45", "ca-ca-ca"), "zigzag");
    assert_eq!(kind("0.45", "ca-ca2-ca"), "linear");
    assert_eq!(kind("0.2", "ca2-ca-ca"), "linear");
    let critical = fs::read_to_string(dir.path().join("critical.csv")).unwrap();
    assert_eq!(critical.lines().count(), 7);
}

#[test]
fn empty_arrangement_is_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), &format!("{TRAP}\n[crystal]\narrangement = []\n"));
    let o = run(&["equilibrium", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 12") && err.contains("must not be empty"), "{err}");
}

#[test]
fn malformed_toml_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), &format!("{TRAP}\n[crystal]\narrangement = [\"ca\"\nextra = 1\n"));
    let o = run(&["equilibrium", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
}

#[test]
fn missing_scenario_is_parse_error() {
    assert_eq!(run(&["modes"]).status.code(), Some(2));
    assert_eq!(run(&["modes", "--scenario", "/nonexistent.toml"]).status.code(), Some(2));
}

#[test]
fn unstable_species_is_solver_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{TRAP}\n[species.heavy]\nmass = 400.0\ncharge = 1\n\n[crystal]\narrangement = [\"ca\", \"heavy\"]\n");
    let path = write_scenario(dir.path(), &body);
    let o = run(&["calibrate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_without_resonance_is_fit_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{TRAP}\n[crystal]\narrangement = [\"ca\"]\n\n[response]\nfield = 1e-3\ndamping_khz = 1.0\nsweep_khz = {{ start = 10.0, stop = 20.0, step = 0.5 }}\n"
    );
    let path = write_scenario(dir.path(), &body);
    let o = run(&["response", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn render_needs_output_directory() {
    let s = scenario("three_ion_central.toml");
    assert_eq!(run(&["render", "--scenario", s.to_str().unwrap()]).status.code(), Some(2));
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_are_byte_identical() {
    let s = scenario("three_ion_central.toml");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        for command in ["equilibrium", "modes", "response", "render"] {
            for format in ["csv", "record"] {
                let out = dir.path().join(command);
                let o = run(&[command, "--scenario", s.to_str().unwrap(), "--seed", "42", "--format", format, "--out", out.to_str().unwrap()]);
                assert!(o.status.success(), "{command}: {}", String::from_utf8_lossy(&o.stderr));
            }
        }
        let all: Vec<_> = ["equilibrium", "modes", "response", "render"].iter().flat_map(|c| snapshot(&dir.path().join(c))).collect();
        runs.push(all);
    }
    assert!(!runs[0].is_empty());
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn render_writes_image_and_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("three_ion_central.toml");
    let o = run(&["render", "--scenario", s.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = fs::read(dir.path().join("image.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("image.truth.json")).unwrap()).unwrap();
    let ions = truth["ions"].as_array().unwrap();
    assert_eq!(ions.len(), 3);
    assert_eq!(ions.iter().filter(|i| i["dark"] == true).count(), 1);
    let positions = fs::read_to_string(dir.path().join("positions.csv")).unwrap();
    for line in positions.lines().skip(1).filter(|l| l.contains(",false,")) {
        let residual: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(residual < 1.0, "{line}");
    }
}

#[test]
fn seed_changes_noise() {
    let s = scenario("three_ion_central.toml");
    let image = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&["render", "--scenario", s.to_str().unwrap(), "--seed", seed, "--out", dir.path().to_str().unwrap()]);
        assert!(o.status.success());
        fs::read(dir.path().join("image.pgm")).unwrap()
    };
    assert_ne!(image("1"), image("2"));
}

#[test]
fn calibrate_echoes_reference_frequencies() {
    let s = scenario("six_ion_pure.toml");
    let o = run(&["calibrate", "--scenario", s.to_str().unwrap(), "--format", "record"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let ca = v["species"].as_array().unwrap().iter().find(|s| s["name"] == "ca").unwrap();
    let f: Vec<f64> = ca["frequencies_khz"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    for (a, b) in f.iter().zip([480.0, 630.0, 119.0]) {
        assert!((a - b).abs() < 1e-9);
    }
}
