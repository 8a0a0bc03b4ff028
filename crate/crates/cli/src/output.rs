use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde_json::Value;

#[derive(Debug)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &'static str, header: &[&str]) -> Self {
        Table { name, header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.header)?;
        for row in &self.rows {
            out.write_record(row)?;
        }
        out.flush()
    }
}

/// Everything one subcommand produces.
#[derive(Debug)]
pub struct Report {
    pub command: &'static str,
    /// Tables in order of importance; the first goes to stdout without `--out`.
    pub tables: Vec<Table>,
    /// Hierarchical result record.
    pub record: Value,
    /// Binary artifacts written regardless of format.
    pub files: Vec<(String, Vec<u8>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Record,
}

pub fn emit(report: &Report, format: Format, out: Option<&Path>) -> io::Result<()> {
    match out {
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            match format {
                Format::Csv => {
                    if let Some(t) = report.tables.first() {
                        t.write_csv(&mut lock)?;
                    }
                }
                Format::Record => {
                    serde_json::to_writer_pretty(&mut lock, &report.record)?;
                    writeln!(lock)?;
                }
            }
            Ok(())
        }
        Some(dir) => {
            fs::create_dir_all(dir)?;
            match format {
                Format::Csv => {
                    for t in &report.tables {
                        t.write_csv(fs::File::create(dir.join(format!("{}.csv", t.name)))?)?;
                    }
                }
                Format::Record => {
                    let mut text = serde_json::to_string_pretty(&report.record)?;
                    text.push('\n');
                    fs::write(dir.join(format!("{}.json", report.command)), text)?;
                }
            }
            for (name, bytes) in &report.files {
                fs::write(dir.join(name), bytes)?;
            }
            Ok(())
        }
    }
}

/// Shortest round-trip decimal; identical across runs and platforms.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v.is_nan() {
        "nan".into()
    } else if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}
