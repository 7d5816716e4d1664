//! Tabular regression data from CSV files.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use neural_mms::hilbert::{fmt_real, GridFunction, SampleGrid};

use crate::{io_err, CliError, Result};

/// Which columns hold the features and which the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub target: String,
}

/// Affine map `(x - mean) / std` for one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScaling {
    pub column: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub grid: Arc<SampleGrid<f64>>,
    pub target: GridFunction<f64>,
    /// Features first, then the target; empty without standardization.
    pub scaling: Vec<ColumnScaling>,
}

/// Writes `column,mean,std`.
pub fn write_scaling<W: Write>(scaling: &[ColumnScaling], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["column", "mean", "std"])?;
    for s in scaling {
        w.write_record([s.column.clone(), fmt_real(s.mean), fmt_real(s.std)])?;
    }
    w.flush().map_err(io_err("scaling"))?;
    Ok(())
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema, standardize: bool) -> Result<Ingested> {
    let file = File::open(path).map_err(io_err(path))?;
    ingest_reader(file, path, schema, standardize)
}

/// As [`ingest_csv`]; `path` is used only in error messages.
pub fn ingest_reader<R: Read>(reader: R, path: &Path, schema: &CsvSchema, standardize: bool) -> Result<Ingested> {
    if schema.features.is_empty() {
        return Err(CliError::Input("schema needs at least one feature column".into()));
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| CliError::Ingest {
            path: path.to_path_buf(),
            row: 1,
            column: name.to_string(),
            message: "column not found in header".into(),
        })
    };
    let names: Vec<&str> = schema
        .features
        .iter()
        .map(String::as_str)
        .chain(std::iter::once(schema.target.as_str()))
        .collect();
    let idx: Vec<usize> = names.iter().map(|n| find(n)).collect::<Result<_>>()?;
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (k, rec) in r.records().enumerate() {
        let row = k + 2;
        let rec = rec?;
        for (j, (&i, name)) in idx.iter().zip(&names).enumerate() {
            let cell = rec.get(i).unwrap_or("");
            let bad = |message: String| CliError::Ingest {
                path: path.to_path_buf(),
                row,
                column: name.to_string(),
                message,
            };
            let v: f64 = cell.parse().map_err(|_| bad(format!("not a number: '{cell}'")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value '{cell}'")));
            }
            cols[j].push(v);
        }
    }
    let n = cols[0].len();
    if n == 0 {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    let mut scaling = Vec::new();
    if standardize {
        for (col, name) in cols.iter_mut().zip(&names) {
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if !(std > 0.0) {
                return Err(CliError::Ingest {
                    path: path.to_path_buf(),
                    row: 1,
                    column: name.to_string(),
                    message: "zero variance, cannot standardize".into(),
                });
            }
            col.iter_mut().for_each(|v| *v = (*v - mean) / std);
            scaling.push(ColumnScaling {
                column: name.to_string(),
                mean,
                std,
            });
        }
    }
    let d = schema.features.len();
    let points: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|j| cols[j][i]).collect()).collect();
    let grid = Arc::new(SampleGrid::uniform(points)?);
    let target = GridFunction::new(Arc::clone(&grid), cols.pop().unwrap_or_default())?;
    Ok(Ingested { grid, target, scaling })
}
