//! Exact minimizing-movement trajectories for the quadratic energy
//! `F[u] = 1/2 ||u - f*||^2`, where each step is `(u + tau f*)/(1 + tau)`.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hilbert::{check_tau, distance, fmt_real, GridFunction};
use crate::scalar::Real;

/// One exact step `(u + tau f*)/(1 + tau)`.
pub fn exact_mms_step<T: Real>(u: &GridFunction<T>, f_star: &GridFunction<T>, tau: T) -> Result<GridFunction<T>> {
    check_tau(tau)?;
    let s = T::one() / (T::one() + tau);
    u.lin_comb(s, f_star, tau * s)
}

/// Decay factor `(1 + tau)^{-n}`, evaluated as `exp(-n ln(1 + tau))`.
/// Underflows gracefully to zero for very large `n`.
pub fn decay_factor<T: Real>(tau: T, n: usize) -> T {
    (-(T::from_count(n) * tau.ln_1p())).exp()
}

/// `(1+tau)^{-n} u0 + (1 - (1+tau)^{-n}) f*`
pub fn exact_mms_closed<T: Real>(
    u0: &GridFunction<T>,
    f_star: &GridFunction<T>,
    tau: T,
    n: usize,
) -> Result<GridFunction<T>> {
    check_tau(tau)?;
    if n == 0 {
        // Keep the start bit-identical.
        return u0.lin_comb(T::one(), f_star, T::zero());
    }
    let q = decay_factor(tau, n);
    u0.lin_comb(q, f_star, T::one() - q)
}

/// How the steps of an [`ExactTrajectory`] were generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evaluation {
    Recursive,
    Closed,
}

#[derive(Debug, Clone)]
pub struct ExactTrajectory<T> {
    pub steps: Vec<GridFunction<T>>,
    pub tau: T,
    pub target: GridFunction<T>,
}

impl<T: Real> ExactTrajectory<T> {
    /// `u^0, ..., u^n` with `n = steps`.
    pub fn compute(
        u0: &GridFunction<T>,
        f_star: &GridFunction<T>,
        tau: T,
        steps: usize,
        how: Evaluation,
    ) -> Result<Self> {
        check_tau(tau)?;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(u0.clone());
        for n in 1..=steps {
            let next = match how {
                Evaluation::Recursive => exact_mms_step(&out[n - 1], f_star, tau)?,
                Evaluation::Closed => exact_mms_closed(u0, f_star, tau, n)?,
            };
            out.push(next);
        }
        Ok(Self {
            steps: out,
            tau,
            target: f_star.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Largest elementwise deviation from the recursion over all steps.
    pub fn recursion_defect(&self) -> Result<T> {
        let mut worst = T::zero();
        for pair in self.steps.windows(2) {
            let next = exact_mms_step(&pair[0], &self.target, self.tau)?;
            for (&a, &b) in next.values().iter().zip(pair[1].values()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    /// `||u^n - f*||` for every step.
    pub fn distances_to_target(&self) -> Result<Vec<T>> {
        self.steps.iter().map(|u| distance(u, &self.target)).collect()
    }

    /// Reference trajectory in the same column layout as the scheme's
    /// trajectory output: one row per transition `n -> n+1`.
    pub fn write_csv<W: Write>(&self, writer: W, energy_of: impl Fn(&GridFunction<T>) -> Result<T>) -> Result<()> {
        let rows = self
            .steps
            .windows(2)
            .enumerate()
            .map(|(n, pair)| {
                let e_start = energy_of(&pair[0])?;
                let e_end = energy_of(&pair[1])?;
                let d = distance(&pair[1], &pair[0])?;
                Ok(ReferenceRow {
                    step: n,
                    energy_start: e_start,
                    energy: e_end,
                    function_step_norm: d,
                    dist_to_min: distance(&pair[1], &self.target)?,
                    initial_dist: distance(&self.steps[0], &self.target)?,
                    tau: self.tau,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_reference_rows(&rows, writer)
    }
}

struct ReferenceRow<T> {
    step: usize,
    energy_start: T,
    energy: T,
    function_step_norm: T,
    dist_to_min: T,
    initial_dist: T,
    tau: T,
}

fn write_reference_rows<T: Real, W: Write>(rows: &[ReferenceRow<T>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let header = crate::mms::TRAJECTORY_COLUMNS;
    w.write_record(header)?;
    for r in rows {
        let objective_end = r.energy + r.function_step_norm * r.function_step_norm / (r.tau + r.tau);
        let mut rec = Vec::with_capacity(header.len());
        for &col in header {
            let cell = match col {
                "step" => r.step.to_string(),
                "tau" => fmt_real(r.tau),
                "rho" => fmt_real(T::one() / (T::one() + r.tau)),
                "energy_start" => fmt_real(r.energy_start),
                "energy" => fmt_real(r.energy),
                "objective_start" => fmt_real(r.energy_start),
                "objective_end" => fmt_real(objective_end),
                "tracking_error_start" | "tracking_error" | "inner_residual" | "param_step_norm" => fmt_real(T::zero()),
                "dist_to_min" => fmt_real(r.dist_to_min),
                "initial_dist_to_min" => fmt_real(r.initial_dist),
                "function_step_norm" => fmt_real(r.function_step_norm),
                "stalled" => "0".into(),
                _ => String::new(),
            };
            rec.push(cell);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Checks that two grid functions share a grid (used by callers combining
/// reference and network trajectories).
pub fn same_grid<T: Real>(a: &GridFunction<T>, b: &GridFunction<T>) -> Result<()> {
    if Arc::ptr_eq(a.grid(), b.grid()) || **a.grid() == **b.grid() {
        Ok(())
    } else {
        Err(Error::Dimension("trajectories live on different grids".into()))
    }
}
