//! CSV readers for matrices and measurement windows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => {
                if let Some(x) = v.iter().find(|x| !x.is_finite()) {
                    return Err(Error::Parse(format!("row {}: non-finite value {x}", i + 1)));
                }
                rows.push(v)
            }
            // A non-numeric first line is a header.
            Err(_) if i == 0 => {}
            Err(e) => return Err(Error::Parse(format!("row {}: {e}", i + 1))),
        }
    }
    if let Some(first) = rows.first() {
        let w = first.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != w) {
            return Err(Error::Parse(format!(
                "row {} has {} fields, expected {w}",
                bad + 1,
                rows[bad].len()
            )));
        }
    }
    Ok(rows)
}

/// Dense matrix from CSV, one row per line. An optional header line is skipped.
pub fn read_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let rows = parse_rows(text)?;
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Parse("matrix has no entries".into()));
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

/// Measurement window read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub window: usize,
    /// Stacked outputs, oldest sample first.
    pub y_stack: DVector<f64>,
    /// Stacked inputs, oldest sample first.
    pub u_stack: DVector<f64>,
}

/// One sample per line: `m` output columns followed by `l` input columns.
pub fn read_measurements_csv(text: &str, m: usize, l: usize) -> Result<Measurements> {
    let rows = parse_rows(text)?;
    if rows.is_empty() {
        return Err(Error::Parse("no measurement rows".into()));
    }
    if rows[0].len() != m + l {
        return Err(Error::DimensionMismatch(format!(
            "measurement rows have {} columns, expected {m} outputs + {l} inputs",
            rows[0].len()
        )));
    }
    let window = rows.len();
    let y_stack = DVector::from_iterator(window * m, rows.iter().flat_map(|r| r[..m].iter().copied()));
    let u_stack = DVector::from_iterator(window * l, rows.iter().flat_map(|r| r[m..].iter().copied()));
    Ok(Measurements {
        window,
        y_stack,
        u_stack,
    })
}
