//! CSV tables with a versioned schema comment, plus gnuplot scripts.
//!
//! Every file starts with `# schema: <name> v<version>`; the next line is the
//! column header. Floats are written with Rust's shortest round-trip format.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::SimResult;

pub struct Table {
    pub name: &'static str,
    pub version: u32,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &'static str, version: u32, header: Vec<String>) -> Self {
        Self { name, version, header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path, file: &str) -> SimResult<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(file);
        let mut out = BufWriter::new(File::create(&path)?);
        writeln!(out, "# schema: {} v{}", self.name, self.version)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(path)
    }
}

pub fn f(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// A gnuplot script plotting `ycols` against `xcol` of a CSV written by
/// [`Table::write`].
pub fn gnuplot(dir: &Path, script: &str, csv_file: &str, xcol: &str, ycols: &[&str], title: &str, logscale: bool) -> SimResult<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(script);
    let png = Path::new(script).with_extension("png");
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset datafile commentschars '#'\nset key autotitle columnhead\n");
    s.push_str("set terminal pngcairo size 900,600\n");
    s.push_str(&format!("set output '{}'\nset title '{title}'\nset xlabel '{xcol}'\n", png.display()));
    if logscale {
        s.push_str("set logscale xy\n");
    }
    let plots: Vec<String> = ycols
        .iter()
        .map(|y| format!("'{csv_file}' using '{xcol}':'{y}' with linespoints title '{y}'"))
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    fs::write(&path, s)?;
    Ok(path)
}
