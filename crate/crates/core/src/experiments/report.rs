//! CSV and JSON emitters for experiment outputs.
//!
//! Every CSV starts with a `# schema=<name>/v<version>` comment line and a
//! fixed header row. Floats use Rust's shortest round-trip formatting, so a
//! rerun with the same config and seed writes identical bytes apart from the
//! timing columns.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// A CSV table with a versioned schema name.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub schema: &'static str,
    pub version: u32,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    /// Header names of wall-clock columns.
    pub timing_columns: Vec<&'static str>,
}

impl Table {
    pub fn new(schema: &'static str, header: &[&'static str], timing_columns: &[&'static str]) -> Self {
        Self { schema, version: 1, header: header.to_vec(), rows: Vec::new(), timing_columns: timing_columns.to_vec() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::shape("CSV row", self.header.len(), row.len()));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!("# schema={}/v{}\n", self.schema, self.version);
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        out.push_str(&String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?);
        Ok(out)
    }

    /// The same table with the timing columns blanked.
    pub fn without_timing(&self) -> Table {
        let idx: Vec<usize> = self
            .header
            .iter()
            .enumerate()
            .filter(|(_, h)| self.timing_columns.contains(h))
            .map(|(i, _)| i)
            .collect();
        let mut t = self.clone();
        for row in &mut t.rows {
            for &i in &idx {
                row[i].clear();
            }
        }
        t
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Shortest round-trip form (exponent notation at the extremes); empty
/// for NaN.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:?}")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Header of the ablation grid CSV.
pub const ABLATION_HEADER: [&str; 8] = ["variant", "seed", "steps", "metric", "params", "g", "lsdi", "time_ms"];
pub const KSWEEP_HEADER: [&str; 5] = ["k_max", "seed", "metric", "params", "time_ms"];
pub const SCALING_HEADER: [&str; 3] = ["model", "n", "median_ms"];
pub const ROUTER_HEADER: [&str; 8] = ["lag", "seed", "metric", "mamba_weight", "psr", "mw", "tcs", "lsdi"];
pub const KERNEL_HEADER: [&str; 5] = ["instance", "t", "lag", "attention", "fit"];
