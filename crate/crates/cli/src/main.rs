//! Command-line scenario runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod output;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ioncrystal::ErrorCategory;

use output::Format;

#[derive(Parser)]
#[command(name = "ioncrystal", version, about = "Simulate mixed-charge ion Coulomb crystals from a scenario file")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario file (TOML).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,

    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; without it the main table or the record goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Trap parameters and per-species secular frequencies.
    Calibrate,
    /// Equilibrium positions and structure classification.
    Equilibrium,
    /// Normal-mode spectrum and eigenvectors.
    Modes,
    /// Structural phase map over the anisotropy and critical points.
    Scan,
    /// Driven response sweep and fitted resonances.
    Response,
    /// Synthetic camera image with ground truth.
    Render,
}

const EXIT_IO: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_FIT: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = &cli.scenario else {
        eprintln!("error: --scenario <path> is required");
        return ExitCode::from(EXIT_PARSE);
    };
    let source = match std::fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_PARSE);
        }
    };
    let scenario = match scenario::parse(&source, cli.seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_PARSE);
        }
    };
    if matches!(cli.command, Command::Render) && cli.out.is_none() {
        eprintln!("error: render writes image files and needs --out <dir>");
        return ExitCode::from(EXIT_PARSE);
    }

    let result = match cli.command {
        Command::Calibrate => commands::calibrate(&scenario),
        Command::Equilibrium => commands::equilibrium_command(&scenario),
        Command::Modes => commands::modes_command(&scenario),
        Command::Scan => commands::scan_command(&scenario),
        Command::Response => commands::response_command(&scenario),
        Command::Render => commands::render_command(&scenario),
    };
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(match e.category() {
                ErrorCategory::Input => EXIT_PARSE,
                ErrorCategory::Solver => EXIT_SOLVER,
                ErrorCategory::Fit => EXIT_FIT,
            });
        }
    };
    if let Err(e) = output::emit(&report, cli.format, cli.out.as_deref()) {
        eprintln!("error: writing output: {e}");
        return ExitCode::from(EXIT_IO);
    }
    ExitCode::SUCCESS
}
