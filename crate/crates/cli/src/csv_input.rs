//! Numeric CSV matrices for the `mmd` command.

use std::fs::File;
use std::path::Path;

use modalign::{Error, Matrix, Result};

/// Parses equal-width numeric rows. A first line with no numeric field is
/// treated as a header. Errors carry the 1-based line number.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let file = File::open(path)?;
    parse_matrix(file)
}

pub fn parse_matrix<R: std::io::Read>(input: R) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(idx + 1, |p| p.line() as usize);
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = rec.position().map_or(idx + 1, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rows.is_empty() && width.is_none() && rec.iter().all(|f| f.parse::<f64>().is_err()) {
            width = Some(rec.len());
            continue;
        }
        let mut row = Vec::with_capacity(rec.len());
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("column {}: {field:?} is not a number", col + 1) })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("column {}: non-finite value", col + 1) });
            }
            row.push(v);
        }
        match width {
            Some(w) if w != row.len() => {
                return Err(Error::Parse { line, msg: format!("expected {w} fields, found {}", row.len()) });
            }
            _ => width = Some(row.len()),
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no data rows".into() });
    }
    Matrix::from_rows(&rows)
}
