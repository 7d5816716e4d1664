//! Outer minimizing-movement driver: warm-started subproblem solves,
//! per-step diagnostics and pretraining of the initial condition.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::hilbert::{
    distance, exact_prox, fmt_real, EnergyFunctional, GridFunction, QuadraticRegressionEnergy, SampleGrid,
};
use crate::linalg::{backtrack_from, cg_solve, least_squares, CgConfig, LineSearchConfig};
use crate::network::{min_singular_value, weighted_min_singular_value, weighted_op_norm, MlpArchitecture, MlpModel};
use crate::scalar::{all_finite, norm2, Real};
use crate::solvers::{
    solve_subproblem_adam, solve_subproblem_gd, solve_subproblem_gn, subproblem_gradient, subproblem_objective,
    AdamConfig, AdamState, GdConfig, GnConfig, InnerSolve, InnerStepRecord, SubproblemSpec,
};
use crate::theory::{constants, contraction_factor, TheoryConstants, TheoryOptions, TrackingRow};

/// Column order of trajectory CSV files.
pub const TRAJECTORY_COLUMNS: &[&str] = &[
    "step",
    "tau",
    "rho",
    "energy_start",
    "energy",
    "objective_start",
    "objective_end",
    "tracking_error_start",
    "tracking_error",
    "inner_residual",
    "dist_to_min",
    "initial_dist_to_min",
    "s_min",
    "gram_s_min",
    "param_step_norm",
    "function_step_norm",
    "displacement_ratio",
    "stalled",
    "inner_steps",
    "accepted_steps",
    "line_search_evals",
    "cg_iters",
    "final_grad_norm",
    "nu",
    "mu",
    "kappa",
    "lambda_hat",
    "l_hat",
    "jac_op_norm",
    "r_w",
    "big_lambda",
    "k_v",
    "h_star_norm",
    "c_v",
    "degenerate",
    "epsilon",
    "delta",
    "wall_time",
];

/// Inner solver with its configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerSolver<T> {
    GaussNewton(GnConfig<T>),
    Adam(AdamConfig<T>),
    GradientDescent(GdConfig<T>),
}

impl<T: Real> InnerSolver<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussNewton(_) => "gn",
            Self::Adam(_) => "adam",
            Self::GradientDescent(_) => "gd",
        }
    }

    pub fn solve<E: EnergyFunctional<T> + ?Sized>(&self, spec: &SubproblemSpec<'_, T, E>) -> Result<InnerSolve<T>> {
        match self {
            Self::GaussNewton(c) => solve_subproblem_gn(spec, c),
            Self::Adam(c) => solve_subproblem_adam(spec, c),
            Self::GradientDescent(c) => solve_subproblem_gd(spec, c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmsConfig<T> {
    pub tau: T,
    pub outer_steps: usize,
    pub solver: InnerSolver<T>,
    pub seed: u64,
    /// Per-step theory constants; `None` skips them.
    pub theory: Option<TheoryOptions<T>>,
}

impl<T: Real> MmsConfig<T> {
    pub fn new(tau: T, outer_steps: usize, solver: InnerSolver<T>) -> Self {
        Self {
            tau,
            outer_steps,
            solver,
            seed: 0,
            theory: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > T::zero() && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if self.outer_steps == 0 {
            return Err(Error::Parameter("outer_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Diagnostics for the transition `n -> n+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MmsRecord<T> {
    pub step: usize,
    pub tau: T,
    pub rho: T,
    /// `F[u^n]`
    pub energy_start: T,
    /// `F[u^{n+1}]`
    pub energy: T,
    pub objective_start: T,
    pub objective_end: T,
    /// `||u^n_NN - u^n||`, NaN without a reference.
    pub tracking_error_start: T,
    pub tracking_error: T,
    /// `||u^{n+1}_NN - J_tau(u^n_NN)||`
    pub inner_residual: T,
    /// `||u^{n+1}_NN - u*||`, NaN when the minimizer is unknown.
    pub dist_to_min: T,
    /// `||u^0 - u*||` for the reference start (the network's without one).
    pub initial_dist_to_min: T,
    /// `sigma_min(J(w^n))`
    pub s_min: T,
    /// Weighted `sigma_min(J(w^n))`.
    pub gram_s_min: T,
    /// `||w^{n+1} - w^n||`
    pub param_step_norm: T,
    /// `||u^{n+1} - u^n||`
    pub function_step_norm: T,
    /// `param_step_norm * gram_s_min / function_step_norm`
    pub displacement_ratio: T,
    pub stalled: bool,
    pub inner_steps: usize,
    pub accepted_steps: usize,
    pub line_search_evals: usize,
    pub cg_iters: usize,
    pub final_grad_norm: T,
    pub theory: Option<TheoryConstants<T>>,
    pub wall_time: f64,
}

impl<T: Real> MmsRecord<T> {
    /// `F[u^{n+1}] + ||u^{n+1} - u^n||^2 / (2 tau) <= F[u^n]` up to round-off.
    pub fn energy_inequality_holds(&self) -> bool {
        let lhs = self.energy + self.function_step_norm * self.function_step_norm / (self.tau + self.tau);
        lhs <= self.energy_start + crate::theory::float_slack(self.energy_start)
    }

    pub fn tracking_row(&self) -> TrackingRow<T> {
        let opt = |x: T| x.is_finite().then_some(x);
        TrackingRow {
            step: self.step,
            tracking_error_start: self.tracking_error_start,
            tracking_error: self.tracking_error,
            inner_residual: self.inner_residual,
            dist_to_min: opt(self.dist_to_min),
            initial_dist_to_min: opt(self.initial_dist_to_min),
            gram_s_min: self.gram_s_min,
            param_step_norm: self.param_step_norm,
        }
    }

    fn cell(&self, column: &str) -> String {
        let t = self.theory.as_ref();
        let th = |f: fn(&TheoryConstants<T>) -> T| t.map_or_else(String::new, |c| fmt_real(f(c)));
        let tho = |f: fn(&TheoryConstants<T>) -> Option<T>| t.and_then(f).map_or_else(String::new, fmt_real);
        match column {
            "step" => self.step.to_string(),
            "tau" => fmt_real(self.tau),
            "rho" => fmt_real(self.rho),
            "energy_start" => fmt_real(self.energy_start),
            "energy" => fmt_real(self.energy),
            "objective_start" => fmt_real(self.objective_start),
            "objective_end" => fmt_real(self.objective_end),
            "tracking_error_start" => fmt_real(self.tracking_error_start),
            "tracking_error" => fmt_real(self.tracking_error),
            "inner_residual" => fmt_real(self.inner_residual),
            "dist_to_min" => fmt_real(self.dist_to_min),
            "initial_dist_to_min" => fmt_real(self.initial_dist_to_min),
            "s_min" => fmt_real(self.s_min),
            "gram_s_min" => fmt_real(self.gram_s_min),
            "param_step_norm" => fmt_real(self.param_step_norm),
            "function_step_norm" => fmt_real(self.function_step_norm),
            "displacement_ratio" => fmt_real(self.displacement_ratio),
            "stalled" => u8::from(self.stalled).to_string(),
            "inner_steps" => self.inner_steps.to_string(),
            "accepted_steps" => self.accepted_steps.to_string(),
            "line_search_evals" => self.line_search_evals.to_string(),
            "cg_iters" => self.cg_iters.to_string(),
            "final_grad_norm" => fmt_real(self.final_grad_norm),
            "nu" => th(|c| c.nu),
            "mu" => th(|c| c.mu),
            "kappa" => th(|c| c.kappa),
            "lambda_hat" => th(|c| c.lambda_hat),
            "l_hat" => tho(|c| c.l_hat),
            "jac_op_norm" => th(|c| c.jac_op_norm),
            "r_w" => tho(|c| c.r_w),
            "big_lambda" => tho(|c| c.big_lambda),
            "k_v" => th(|c| c.k_v),
            "h_star_norm" => th(|c| c.h_star_norm),
            "c_v" => tho(|c| c.c_v),
            "degenerate" => t.map_or_else(String::new, |c| u8::from(c.degenerate).to_string()),
            "epsilon" => th(|c| c.epsilon),
            "delta" => tho(|c| c.delta),
            "wall_time" => format!("{:.6e}", self.wall_time),
            _ => String::new(),
        }
    }
}

/// A mid-run failure: the step at which it happened and the message.
#[derive(Debug, Clone, PartialEq)]
pub struct MmsFailure {
    pub step: usize,
    pub message: String,
}

/// Result of [`run_mms`]; on failure `records` holds the completed steps.
#[derive(Debug, Clone)]
pub struct MmsRun<T> {
    pub records: Vec<MmsRecord<T>>,
    /// `u^0_NN, u^1_NN, ...` (one more than `records`).
    pub iterates: Vec<GridFunction<T>>,
    pub model: MlpModel<T>,
    /// Inner-solver trace of each completed step.
    pub inner_traces: Vec<Vec<InnerStepRecord<T>>>,
    pub failure: Option<MmsFailure>,
}

impl<T: Real> MmsRun<T> {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn tracking_rows(&self) -> Vec<TrackingRow<T>> {
        self.records.iter().map(MmsRecord::tracking_row).collect()
    }
}

fn nan<T: Real>() -> T {
    T::nan()
}

/// Runs `cfg.outer_steps` minimizing-movement steps from `initial`.
///
/// `reference` holds the exact trajectory `u^0..u^N` (at least
/// `outer_steps + 1` entries) used for the tracking errors. Inner-solver
/// failures end the run early and are reported in [`MmsRun::failure`].
pub fn run_mms<T: Real, E: EnergyFunctional<T> + ?Sized>(
    initial: &MlpModel<T>,
    cfg: &MmsConfig<T>,
    energy: &E,
    grid: &Arc<SampleGrid<T>>,
    reference: Option<&[GridFunction<T>]>,
) -> Result<MmsRun<T>> {
    cfg.validate()?;
    let mut model = initial.clone();
    let mut anchor = model.forward(grid)?;
    if let Some(r) = reference {
        if r.len() < cfg.outer_steps + 1 {
            return Err(Error::Input(format!(
                "reference has {} steps, need {}",
                r.len(),
                cfg.outer_steps + 1
            )));
        }
        for u in r {
            if u.len() != anchor.len() {
                return Err(Error::Dimension("reference does not match the network output".into()));
            }
        }
    }
    let rho = contraction_factor(cfg.tau, energy.strong_convexity());
    let minimizer = energy.minimizer();
    let initial_dist = match (minimizer, reference) {
        (Some(m), Some(r)) => distance(&r[0], m)?,
        (Some(m), None) => distance(&anchor, m)?,
        (None, _) => nan(),
    };
    let mut records = Vec::with_capacity(cfg.outer_steps);
    let mut iterates = Vec::with_capacity(cfg.outer_steps + 1);
    iterates.push(anchor.clone());
    let mut inner_traces = Vec::with_capacity(cfg.outer_steps);
    let mut lip_running = T::zero();
    for n in 0..cfg.outer_steps {
        let started = Instant::now();
        let outcome = outer_step(&model, &anchor, cfg, energy, grid, reference, n, &mut lip_running);
        match outcome {
            Ok((next_model, next_anchor, mut rec, trace)) => {
                rec.rho = rho;
                rec.initial_dist_to_min = initial_dist;
                rec.dist_to_min = match minimizer {
                    Some(m) => distance(&next_anchor, m)?,
                    None => nan(),
                };
                rec.wall_time = started.elapsed().as_secs_f64();
                log::debug!(
                    "step {n}: energy {} -> {}, tracking {}",
                    rec.energy_start,
                    rec.energy,
                    rec.tracking_error
                );
                records.push(rec);
                inner_traces.push(trace);
                iterates.push(next_anchor.clone());
                model = next_model;
                anchor = next_anchor;
            }
            Err(e) => {
                log::warn!("outer step {n} failed: {e}");
                return Ok(MmsRun {
                    records,
                    iterates,
                    model,
                    inner_traces,
                    failure: Some(MmsFailure {
                        step: n,
                        message: e.to_string(),
                    }),
                });
            }
        }
    }
    Ok(MmsRun {
        records,
        iterates,
        model,
        inner_traces,
        failure: None,
    })
}

/// Next model, next output, the record and the inner trace.
type StepOutcome<T> = (MlpModel<T>, GridFunction<T>, MmsRecord<T>, Vec<InnerStepRecord<T>>);

#[allow(clippy::too_many_arguments)]
fn outer_step<T: Real, E: EnergyFunctional<T> + ?Sized>(
    model: &MlpModel<T>,
    anchor: &GridFunction<T>,
    cfg: &MmsConfig<T>,
    energy: &E,
    grid: &Arc<SampleGrid<T>>,
    reference: Option<&[GridFunction<T>]>,
    n: usize,
    lip_running: &mut T,
) -> Result<StepOutcome<T>> {
    let spec = SubproblemSpec::new(model, anchor, energy, cfg.tau, grid)?;
    let energy_start = energy.value(anchor)?;
    let objective_start = subproblem_objective(&spec, model.params())?;
    let jac = model.jacobian(grid)?;
    let weights = anchor.grid().weights();
    let s_min = min_singular_value(&jac)?;
    let gram_s_min = weighted_min_singular_value(&jac, weights)?;
    *lip_running = lip_running.max(weighted_op_norm(&jac, weights));
    let theory = match &cfg.theory {
        Some(opts) => {
            let opts = TheoryOptions {
                seed: opts.seed ^ cfg.seed.wrapping_add(n as u64),
                ..*opts
            };
            Some(constants(
                cfg.tau,
                energy,
                anchor,
                model,
                grid,
                &opts,
                Some(*lip_running),
            )?)
        }
        None => None,
    };

    let solve = cfg.solver.solve(&spec)?;
    for r in &solve.trace {
        log::trace!(
            "step {n}.{}: objective {} -> {}, |d| {}, t {}, cg {} (residual {}), evals {}",
            r.step,
            r.objective,
            r.objective_after,
            r.direction_norm,
            r.accepted_t,
            r.cg_iters,
            r.cg_residual,
            r.line_search_evals
        );
    }
    let final_grad_norm = norm2(&subproblem_gradient(&spec, &solve.params)?);
    let param_step_norm = norm2(
        &solve
            .params
            .iter()
            .zip(model.params())
            .map(|(&a, &b)| a - b)
            .collect::<Vec<_>>(),
    );
    let next_model = model.with_params(solve.params.clone())?;
    let next = next_model.forward_on(grid, anchor.grid())?;
    if !all_finite(next.values()) {
        return Err(Error::Solver {
            step: n,
            message: "network output is not finite".into(),
        });
    }
    let energy_end = energy.value(&next)?;
    let function_step_norm = distance(&next, anchor)?;
    let objective_end = energy_end + function_step_norm * function_step_norm / (cfg.tau + cfg.tau);
    let inner_residual = if energy.strong_convexity() > T::zero() {
        distance(&next, &exact_prox(anchor, cfg.tau, energy)?)?
    } else {
        nan()
    };
    let (tracking_error_start, tracking_error) = match reference {
        Some(r) => (distance(anchor, &r[n])?, distance(&next, &r[n + 1])?),
        None => (nan(), nan()),
    };
    let displacement_ratio = if function_step_norm > T::zero() {
        param_step_norm * gram_s_min / function_step_norm
    } else {
        nan()
    };
    let rec = MmsRecord {
        step: n,
        tau: cfg.tau,
        rho: nan(),
        energy_start,
        energy: energy_end,
        objective_start,
        objective_end,
        tracking_error_start,
        tracking_error,
        inner_residual,
        dist_to_min: nan(),
        initial_dist_to_min: nan(),
        s_min,
        gram_s_min,
        param_step_norm,
        function_step_norm,
        displacement_ratio,
        stalled: solve.trace.iter().any(|r| r.rejected),
        inner_steps: solve.trace.len(),
        accepted_steps: solve
            .trace
            .iter()
            .filter(|r| !r.rejected && r.accepted_t > T::zero())
            .count(),
        line_search_evals: solve.trace.iter().map(|r| r.line_search_evals).sum(),
        cg_iters: solve.trace.iter().map(|r| r.cg_iters).sum(),
        final_grad_norm,
        theory,
        wall_time: 0.0,
    };
    Ok((next_model, next, rec, solve.trace))
}

/// Writes records in [`TRAJECTORY_COLUMNS`] order.
pub fn write_trajectory_csv<T: Real, W: Write>(records: &[MmsRecord<T>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRAJECTORY_COLUMNS)?;
    for r in records {
        w.write_record(TRAJECTORY_COLUMNS.iter().map(|c| r.cell(c)))?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format iterates: `step,index,value,weight`.
pub fn write_iterates_csv<T: Real, W: Write>(iterates: &[GridFunction<T>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "index", "value", "weight"])?;
    for (n, u) in iterates.iter().enumerate() {
        for (i, (&v, &q)) in u.values().iter().zip(u.grid().weights()).enumerate() {
            w.write_record([n.to_string(), i.to_string(), fmt_real(v), fmt_real(q)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A trajectory CSV read back as named numeric columns (blank cells are NaN).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, cell)| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        return Ok(f64::NAN);
                    }
                    cell.parse::<f64>().map_err(|_| {
                        Error::Input(format!(
                            "row {}, column '{}': not a number: '{cell}'",
                            line + 2,
                            columns[j]
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    fn index(&self) -> HashMap<&str, usize> {
        self.columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
    }

    /// One column, or an input error naming it.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = *self
            .index()
            .get(name)
            .ok_or_else(|| Error::Input(format!("trajectory lacks column '{name}'")))?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Rows in the form expected by the tracking certificate.
    pub fn tracking_rows<T: Real>(&self) -> Result<Vec<TrackingRow<T>>> {
        let step = self.column("step")?;
        let es = self.column("tracking_error_start")?;
        let e = self.column("tracking_error")?;
        let res = self.column("inner_residual")?;
        let d = self.column("dist_to_min")?;
        let d0 = self.column("initial_dist_to_min")?;
        let s = self.column("gram_s_min")?;
        let dw = self.column("param_step_norm")?;
        let opt = |x: f64| x.is_finite().then(|| T::lit(x));
        Ok((0..self.rows.len())
            .map(|i| TrackingRow {
                step: step[i] as usize,
                tracking_error_start: T::lit(es[i]),
                tracking_error: T::lit(e[i]),
                inner_residual: T::lit(res[i]),
                dist_to_min: opt(d[i]),
                initial_dist_to_min: opt(d0[i]),
                gram_s_min: T::lit(s[i]),
                param_step_norm: T::lit(dw[i]),
            })
            .collect())
    }
}

/// Optimizer for [`pretrain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMethod {
    Adam,
    GaussNewton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig<T> {
    pub iters: usize,
    pub learning_rate: T,
    pub method: PretrainMethod,
    /// Stops once the fit error is at most this.
    pub tolerance: T,
}

impl<T: Real> Default for PretrainConfig<T> {
    fn default() -> Self {
        Self {
            iters: 2000,
            learning_rate: T::lit(1e-3),
            method: PretrainMethod::Adam,
            tolerance: T::zero(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained<T> {
    pub model: MlpModel<T>,
    /// `||u_NN(w^0) - target||`
    pub fit_error: T,
    pub iters: usize,
}

/// Fits a freshly initialized network to `target`.
pub fn pretrain_initial<T: Real>(
    arch: MlpArchitecture,
    target: &GridFunction<T>,
    grid: &SampleGrid<T>,
    cfg: &PretrainConfig<T>,
    seed: u64,
) -> Result<Pretrained<T>> {
    let model = MlpModel::initialize(arch, seed)?;
    pretrain(&model, target, grid, cfg)
}

/// Minimizes `1/2 ||u_NN(w) - target||^2` from `model`'s parameters.
pub fn pretrain<T: Real>(
    model: &MlpModel<T>,
    target: &GridFunction<T>,
    grid: &SampleGrid<T>,
    cfg: &PretrainConfig<T>,
) -> Result<Pretrained<T>> {
    let out_grid = target.grid();
    if target.len() != grid.len() * model.arch().output_dim || grid.dim() != model.arch().input_dim {
        return Err(Error::Dimension(
            "target does not match the network on this grid".into(),
        ));
    }
    if !(cfg.learning_rate > T::zero()) {
        return Err(Error::Parameter("pretraining learning rate must be positive".into()));
    }
    let loss = QuadraticRegressionEnergy::new(target.clone());
    let weights = out_grid.weights();
    let mut w = model.params().to_vec();
    let mut current = model.clone();
    let fit = |m: &MlpModel<T>| -> Result<(T, GridFunction<T>)> {
        let u = m.forward_on(grid, out_grid)?;
        Ok((distance(&u, target)?, u))
    };
    let (mut err, _) = fit(&current)?;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        w.len(),
    )?;
    let mut iters = 0;
    while iters < cfg.iters && err > cfg.tolerance {
        let (values, jac) = current.forward_and_jacobian(grid)?;
        let r: Vec<T> = values.iter().zip(target.values()).map(|(&a, &b)| a - b).collect();
        match cfg.method {
            PretrainMethod::Adam => {
                let wr: Vec<T> = r.iter().zip(weights).map(|(&a, &q)| a * q).collect();
                let g = jac.t_matvec(&wr);
                if !all_finite(&g) {
                    return Err(Error::Numerical {
                        message: format!("pretraining gradient diverged at iteration {iters}"),
                        residual: f64::NAN,
                    });
                }
                adam.step(&mut w, &g);
            }
            PretrainMethod::GaussNewton => {
                let sqrt_w: Vec<T> = weights.iter().map(|q| q.sqrt()).collect();
                let a = jac.scale_rows(&sqrt_w);
                let b: Vec<T> = r.iter().zip(&sqrt_w).map(|(&x, &q)| -x * q).collect();
                let eta = match least_squares(&a, &b) {
                    Ok(eta) => eta,
                    Err(_) => {
                        // Rank-deficient: minimum-norm-ish direction from CG.
                        let rhs = a.t_matvec(&b);
                        let mut tmp = vec![T::zero(); a.rows()];
                        cg_solve(
                            |z: &[T], out: &mut [T]| {
                                a.matvec_into(z, &mut tmp);
                                a.t_matvec_into(&tmp, out);
                            },
                            &rhs,
                            &CgConfig {
                                max_iters: w.len().max(1),
                                rel_tolerance: T::lit(1e-10),
                            },
                        )?
                        .solution
                    }
                };
                let f0 = loss.value(&GridFunction::new(Arc::clone(out_grid), values)?)?;
                let trial = |t: T| -> Vec<T> { w.iter().zip(&eta).map(|(&x, &d)| x + t * d).collect() };
                let ls = backtrack_from(
                    f0,
                    |t| {
                        current
                            .with_params(trial(t))
                            .and_then(|m| m.forward_on(grid, out_grid))
                            .and_then(|u| loss.value(&u))
                            .unwrap_or(T::nan())
                    },
                    norm2(&eta),
                    &LineSearchConfig {
                        max_step_norm: T::max_value(),
                        max_backtracks: 30,
                        ..LineSearchConfig::default()
                    },
                )?;
                iters += 1;
                if ls.rejected {
                    break;
                }
                w = trial(ls.t);
                current = current.with_params(w.clone())?;
                err = fit(&current)?.0;
                continue;
            }
        }
        iters += 1;
        current = current.with_params(w.clone())?;
        err = fit(&current)?.0;
        if !err.is_finite() {
            return Err(Error::Numerical {
                message: format!("pretraining diverged at iteration {iters}"),
                residual: f64::NAN,
            });
        }
    }
    Ok(Pretrained {
        model: current,
        fit_error: err,
        iters,
    })
}
