//! CSV export with a one-line JSON metadata header.
//!
//! Layout: `# {compact json}` on the first line, column names on the second,
//! then one row of `f64` values per line. Values are written with Rust's
//! `Display`, which round-trips f64 exactly, so rerunning a deterministic
//! pipeline rewrites byte-identical files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{ItoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub meta: serde_json::Value,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn write_csv(
    path: &Path,
    meta: &serde_json::Value,
    columns: &[&str],
    rows: &[Vec<f64>],
) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != columns.len() {
            return Err(ItoError::ShapeMismatch {
                what: format!("csv row {i}"),
                expected: format!("{} values", columns.len()),
                got: format!("{}", row.len()),
            });
        }
    }
    let file = File::create(path).map_err(|e| ItoError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| ItoError::io(path.display().to_string(), e);
    // serde_json's compact form is deterministic for a fixed Value.
    writeln!(w, "# {}", serde_json::to_string(meta).expect("serializable meta")).map_err(io_err)?;
    writeln!(w, "{}", columns.join(",")).map_err(io_err)?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let file = File::open(path).map_err(|e| ItoError::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let io_err = |e: std::io::Error| ItoError::io(path.display().to_string(), e);

    let header = lines
        .next()
        .ok_or_else(|| ItoError::Format(format!("{}: empty file", path.display())))?
        .map_err(io_err)?;
    let meta_text = header.strip_prefix("# ").ok_or_else(|| {
        ItoError::Format(format!("{}: first line must be '# {{json}}'", path.display()))
    })?;
    let meta: serde_json::Value = serde_json::from_str(meta_text)
        .map_err(|e| ItoError::Format(format!("{}: bad metadata json: {e}", path.display())))?;

    let column_line = lines
        .next()
        .ok_or_else(|| ItoError::Format(format!("{}: missing column row", path.display())))?
        .map_err(io_err)?;
    let columns: Vec<String> = column_line.split(',').map(str::to_string).collect();

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(columns.len());
        for cell in line.split(',') {
            let v: f64 = cell.parse().map_err(|_| {
                ItoError::Format(format!(
                    "{}: row {}: not a number: {cell:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            row.push(v);
        }
        if row.len() != columns.len() {
            return Err(ItoError::Format(format!(
                "{}: row {} has {} values, expected {}",
                path.display(),
                i + 1,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(CsvTable { meta, columns, rows })
}
