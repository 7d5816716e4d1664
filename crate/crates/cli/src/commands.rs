//! The `run`, `certify` and `compare` verbs, returning exit codes.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use neural_mms::hilbert::fmt_real;
use neural_mms::mms::TrajectoryTable;
use neural_mms::theory::{
    certificate_summary, certify_records, lambda_budget, write_certificate_csv, TrackingCertificate,
};

use crate::compare::{
    diff_trajectories, iterate_distances, read_iterates, write_distances, write_trajectory_diff, ITERATE_COLUMNS,
};
use crate::config::ExperimentConfig;
use crate::experiment::run_experiment;
use crate::{io_err, CliError, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CERTIFICATE: i32 = 2;

/// Runs an experiment; runtime failures of any run take precedence over
/// certificate failures in the exit code.
pub fn run(config: Option<&Path>, overrides: &[(String, String)]) -> Result<i32> {
    let cfg = ExperimentConfig::resolve(config, overrides)?;
    let report = run_experiment(&cfg)?;
    let mut out = io::stdout().lock();
    for o in &report.outcomes {
        let s = &o.summary;
        writeln!(
            out,
            "{}: steps={} final_energy={} final_tracking_error={} rel_l2={} certificate={}",
            s.solver,
            s.steps,
            fmt_real(s.final_energy),
            fmt_real(s.final_tracking_error),
            fmt_real(s.rel_l2),
            if s.certificate_passed { "pass" } else { "fail" }
        )
        .map_err(io_err("stdout"))?;
        if let Some(f) = &s.failure {
            writeln!(out, "{}: run failed at {f}", s.solver).map_err(io_err("stdout"))?;
        }
    }
    writeln!(out, "outputs in {}", report.output_dir.display()).map_err(io_err("stdout"))?;
    Ok(if !report.failed_runs().is_empty() {
        EXIT_RUNTIME
    } else if report.certificates_passed() {
        EXIT_OK
    } else {
        EXIT_CERTIFICATE
    })
}

/// Options of the `certify` verb.
#[derive(Debug, Clone, Default)]
pub struct CertifyOptions {
    pub epsilon: f64,
    /// Overrides the `rho` column.
    pub rho: Option<f64>,
    /// Jacobian-Lipschitz estimate for the non-degeneracy budget.
    pub l_hat: Option<f64>,
    pub output: Option<PathBuf>,
}

/// Certifies a trajectory table; returns the certificate and its report.
pub fn certify_table(table: &TrajectoryTable, opts: &CertifyOptions) -> Result<(TrackingCertificate<f64>, String)> {
    let rows = table.tracking_rows::<f64>()?;
    let rho = match opts.rho {
        Some(r) => r,
        None => *table
            .column("rho")?
            .first()
            .ok_or_else(|| CliError::Input("trajectory has no rows".into()))?,
    };
    let cert = certify_records(&rows, rho, opts.epsilon)?;
    let mut text = certificate_summary(&cert, None);
    if let (Some(l_hat), Some(first)) = (opts.l_hat, rows.first()) {
        let budget = lambda_budget(&rows, first.gram_s_min / 2.0, l_hat);
        match budget.exhausted_at {
            Some(n) => text.push_str(&format!("lambda budget exhausted at step {n}\n")),
            None => text.push_str("lambda budget positive throughout\n"),
        }
        if !budget.violations.is_empty() {
            text.push_str(&format!(
                "lambda proxy above empirical value at steps {:?}\n",
                budget.violations
            ));
        }
    }
    Ok((cert, text))
}

pub fn certify(trajectory: &Path, opts: &CertifyOptions) -> Result<i32> {
    let table = TrajectoryTable::read(File::open(trajectory).map_err(io_err(trajectory))?)?;
    let (cert, text) = certify_table(&table, opts)?;
    print!("{text}");
    if let Some(p) = &opts.output {
        write_certificate_csv(&cert, BufWriter::new(File::create(p).map_err(io_err(p))?))?;
    }
    Ok(if cert.passed { EXIT_OK } else { EXIT_CERTIFICATE })
}

fn is_iterates(path: &Path) -> Result<bool> {
    let mut r = csv::Reader::from_reader(File::open(path).map_err(io_err(path))?);
    Ok(r.headers()?.iter().eq(ITERATE_COLUMNS))
}

/// Diffs two trajectory files, or two iterate files (emitting the
/// per-step distance between the runs).
pub fn compare(a: &Path, b: &Path, output: Option<&Path>) -> Result<i32> {
    let mut buf = Vec::new();
    match (is_iterates(a)?, is_iterates(b)?) {
        (true, true) => {
            let ia = read_iterates(File::open(a).map_err(io_err(a))?)?;
            let ib = read_iterates(File::open(b).map_err(io_err(b))?)?;
            write_distances(&iterate_distances(&ia, &ib)?, &mut buf)?;
        }
        (false, false) => {
            let ta = TrajectoryTable::read(File::open(a).map_err(io_err(a))?)?;
            let tb = TrajectoryTable::read(File::open(b).map_err(io_err(b))?)?;
            write_trajectory_diff(&diff_trajectories(&ta, &tb)?, &mut buf)?;
        }
        _ => {
            return Err(CliError::Input(
                "cannot compare an iterate file with a trajectory file".into(),
            ))
        }
    }
    match output {
        Some(p) => fs::write(p, &buf).map_err(io_err(p))?,
        None => io::stdout().write_all(&buf).map_err(io_err("stdout"))?,
    }
    Ok(EXIT_OK)
}
