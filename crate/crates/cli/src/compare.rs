//! Diffs of two trajectory files.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use neural_mms::hilbert::fmt_real;
use neural_mms::mms::TrajectoryTable;

use crate::{io_err, CliError, Result};

pub const ITERATE_COLUMNS: [&str; 4] = ["step", "index", "value", "weight"];

/// Per-step comparison of two trajectory tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDiff {
    pub step: usize,
    pub energy: (f64, f64),
    pub tracking_error: (f64, f64),
    /// Largest absolute difference over the shared numeric columns
    /// (wall time excluded, NaN cells skipped).
    pub max_abs_diff: f64,
}

pub fn diff_trajectories(a: &TrajectoryTable, b: &TrajectoryTable) -> Result<Vec<TrajectoryDiff>> {
    let shared: Vec<(usize, usize)> = a
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.as_str() != "wall_time")
        .filter_map(|(i, c)| b.columns.iter().position(|d| d == c).map(|j| (i, j)))
        .collect();
    let (ea, eb) = (a.column("energy")?, b.column("energy")?);
    let (ta, tb) = (a.column("tracking_error")?, b.column("tracking_error")?);
    let steps = a.column("step")?;
    let n = a.rows.len().min(b.rows.len());
    Ok((0..n)
        .map(|k| TrajectoryDiff {
            step: steps[k] as usize,
            energy: (ea[k], eb[k]),
            tracking_error: (ta[k], tb[k]),
            max_abs_diff: shared
                .iter()
                .map(|&(i, j)| (a.rows[k][i] - b.rows[k][j]).abs())
                .filter(|d| !d.is_nan())
                .fold(0.0, f64::max),
        })
        .collect())
}

/// Long-format iterates keyed by step: `(values, weights)` in index order.
pub type Iterates = BTreeMap<usize, (Vec<f64>, Vec<f64>)>;

pub fn read_iterates<R: Read>(reader: R) -> Result<Iterates> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != ITERATE_COLUMNS {
        return Err(CliError::Input(format!(
            "expected iterate columns {ITERATE_COLUMNS:?}, got {header:?}"
        )));
    }
    let mut out: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let cell = |j: usize| -> Result<f64> {
            rec[j].trim().parse().map_err(|_| {
                CliError::Input(format!(
                    "iterates row {}, column '{}': not a number",
                    k + 2,
                    ITERATE_COLUMNS[j]
                ))
            })
        };
        let step = cell(0)? as usize;
        let index = cell(1)? as usize;
        let entry = out.entry(step).or_default();
        if index != entry.0.len() {
            return Err(CliError::Input(format!("iterates row {}: index out of order", k + 2)));
        }
        entry.0.push(cell(2)?);
        entry.1.push(cell(3)?);
    }
    Ok(out)
}

/// `||u_a^n - u_b^n||` for every step present in both files.
pub fn iterate_distances(
    a: &BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
    b: &BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for (step, (va, wa)) in a {
        let Some((vb, wb)) = b.get(step) else { continue };
        if va.len() != vb.len() || wa != wb {
            return Err(CliError::Input(format!(
                "step {step}: iterates live on different grids"
            )));
        }
        let sq: f64 = va.iter().zip(vb).zip(wa).map(|((x, y), w)| w * (x - y) * (x - y)).sum();
        out.push((*step, sq.sqrt()));
    }
    Ok(out)
}

pub fn write_trajectory_diff<W: Write>(rows: &[TrajectoryDiff], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "step",
        "energy_a",
        "energy_b",
        "tracking_error_a",
        "tracking_error_b",
        "max_abs_diff",
    ])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            fmt_real(r.energy.0),
            fmt_real(r.energy.1),
            fmt_real(r.tracking_error.0),
            fmt_real(r.tracking_error.1),
            fmt_real(r.max_abs_diff),
        ])?;
    }
    w.flush().map_err(io_err("diff"))?;
    Ok(())
}

pub fn write_distances<W: Write>(rows: &[(usize, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "distance"])?;
    for (s, d) in rows {
        w.write_record([s.to_string(), fmt_real(*d)])?;
    }
    w.flush().map_err(io_err("distances"))?;
    Ok(())
}
