//! Writing tables and JSON documents into the output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::{CliError, Format};

/// A numeric table with named columns. Floats are written in shortest
/// round-trip form, so re-parsing gives back the exact values.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    /// Writes `<stem>.csv` or `<stem>.json`; returns the path written.
    pub fn write(&self, dir: &Path, stem: &str, format: Format) -> Result<PathBuf, CliError> {
        match format {
            Format::Csv => {
                let path = dir.join(format!("{stem}.csv"));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(&self.columns)?;
                for row in &self.rows {
                    w.write_record(row.iter().map(|v| v.to_string()))?;
                }
                w.flush()?;
                Ok(path)
            }
            Format::Json => {
                let path = dir.join(format!("{stem}.json"));
                write_json(&path, &json!({ "columns": self.columns, "rows": self.rows }))?;
                Ok(path)
            }
        }
    }
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}
