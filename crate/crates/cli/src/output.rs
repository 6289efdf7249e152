//! Output rendering: human-readable tables and line-delimited machine
//! records, every file stamped with the config hash.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

pub struct OutDir {
    root: std::path::PathBuf,
    pub config_hash: String,
}

impl OutDir {
    pub fn create(root: &Path, config_hash: &str) -> anyhow::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn path(&self, name: &str) -> std::path::PathBuf {
        self.root.join(name)
    }

    /// Write a text file with the provenance header line.
    pub fn write_text(&self, name: &str, body: &str) -> anyhow::Result<()> {
        let mut file = BufWriter::new(File::create(self.path(name))?);
        writeln!(file, "# config_hash={}", self.config_hash)?;
        file.write_all(body.as_bytes())?;
        file.flush()?;
        Ok(())
    }

    /// Write line-delimited JSON records, each carrying the config hash.
    pub fn write_ndjson<T: Serialize>(&self, name: &str, records: &[T]) -> anyhow::Result<()> {
        let mut file = BufWriter::new(File::create(self.path(name))?);
        for record in records {
            let mut value = serde_json::to_value(record)?;
            if let Some(object) = value.as_object_mut() {
                object.insert(
                    "config_hash".to_string(),
                    serde_json::Value::String(self.config_hash.clone()),
                );
            }
            serde_json::to_writer(&mut file, &value)?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
        Ok(())
    }

    /// Write a CSV file (with the provenance comment line above the header).
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<()> {
        let mut file = BufWriter::new(File::create(self.path(name))?);
        writeln!(file, "# config_hash={}", self.config_hash)?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        for row in rows {
            writer.write_record(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Fixed-width table builder.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let columns = self.header.len();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate().take(columns) {
                widths[i] = widths[i].max(cell.len());
            }
        }
        let mut out = String::new();
        let mut line = String::new();
        for (i, h) in self.header.iter().enumerate() {
            let _ = write!(line, "{:width$}  ", h, width = widths[i]);
        }
        out.push_str(line.trim_end());
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (columns - 1)));
        out.push('\n');
        for row in &self.rows {
            let mut line = String::new();
            for (i, cell) in row.iter().enumerate().take(columns) {
                let _ = write!(line, "{:width$}  ", cell, width = widths[i]);
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

/// p-value rendering: small values print as "<0.001".
pub fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

pub fn format_ci(low: f64, high: f64) -> String {
    format!("({low:.3}, {high:.3})")
}
