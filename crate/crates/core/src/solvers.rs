//! Inner solvers for one minimizing-movement subproblem
//!
//! `J(w) = ||u_w - u^n||^2 / (2 tau) + F[u_w]`
//!
//! The Gauss-Newton / Levenberg-Marquardt solver solves
//! `((1/tau + c) J^T W J + rho I) eta = -J^T W r` with
//! `r = (u - u^n)/tau + grad F[u]`, where `W` is the diagonal of grid weights
//! divided by their mean (the identity on uniform grids, so the `1/N`
//! factors cancel) and `c = L_F` (exactly 1 for the quadratic energy).
//! Adam and plain gradient descent serve as first-order baselines; their
//! gradient is assembled as `J^T diag(w) r`.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hilbert::{check_tau, fmt_real, EnergyFunctional, GridFunction, SampleGrid};
use crate::linalg::{backtrack_from, cg_solve, least_squares, CgConfig, DenseMatrix, LineSearchConfig};
use crate::network::MlpModel;
use crate::scalar::{all_finite, dot, norm2, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnConfig<T> {
    pub inner_steps: usize,
    pub lm_damping: T,
    pub cg: CgConfig<T>,
    pub line_search: LineSearchConfig<T>,
}

impl<T: Real> Default for GnConfig<T> {
    fn default() -> Self {
        Self {
            inner_steps: 5,
            lm_damping: T::zero(),
            cg: CgConfig::default(),
            line_search: LineSearchConfig::default(),
        }
    }
}

impl<T: Real> GnConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Parameter("inner_steps must be >= 1".into()));
        }
        if !(self.lm_damping >= T::zero()) {
            return Err(Error::Parameter("lm_damping must be >= 0".into()));
        }
        self.cg.validate()?;
        self.line_search.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub inner_iters: usize,
}

impl<T: Real> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            inner_iters: 500,
        }
    }
}

impl<T: Real> AdamConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: T| b >= T::zero() && b < T::one();
        if !(self.learning_rate > T::zero()) || !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Parameter("adam needs lr > 0 and betas in [0,1)".into()));
        }
        if !(self.eps > T::zero()) {
            return Err(Error::Parameter("adam eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdConfig<T> {
    pub learning_rate: T,
    pub inner_iters: usize,
}

impl<T: Real> Default for GdConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(1e-3),
            inner_iters: 500,
        }
    }
}

/// One subproblem: the warm-start model, the anchor `u^n` and the energy.
pub struct SubproblemSpec<'a, T: Real, E: ?Sized> {
    pub model: &'a MlpModel<T>,
    pub anchor: &'a GridFunction<T>,
    pub energy: &'a E,
    pub tau: T,
    pub grid: &'a SampleGrid<T>,
}

impl<'a, T: Real, E: EnergyFunctional<T> + ?Sized> SubproblemSpec<'a, T, E> {
    /// Checks that `anchor` is the network output at the warm start.
    pub fn new(
        model: &'a MlpModel<T>,
        anchor: &'a GridFunction<T>,
        energy: &'a E,
        tau: T,
        grid: &'a SampleGrid<T>,
    ) -> Result<Self> {
        let spec = Self::unchecked(model, anchor, energy, tau, grid)?;
        let u = spec.model.forward_raw(grid)?;
        let scale = anchor.values().iter().fold(T::one(), |m, v| m.max(v.abs()));
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(64.0)) * scale;
        if let Some(i) = u.iter().zip(anchor.values()).position(|(&a, &b)| (a - b).abs() > tol) {
            return Err(Error::Precondition(format!(
                "anchor differs from the warm-start output at row {i}"
            )));
        }
        Ok(spec)
    }

    /// Builds a spec without the warm-start check.
    pub fn unchecked(
        model: &'a MlpModel<T>,
        anchor: &'a GridFunction<T>,
        energy: &'a E,
        tau: T,
        grid: &'a SampleGrid<T>,
    ) -> Result<Self> {
        check_tau(tau)?;
        let rows = grid.len() * model.arch().output_dim;
        if anchor.len() != rows {
            return Err(Error::Dimension(format!(
                "anchor has {} values, network produces {rows}",
                anchor.len()
            )));
        }
        if grid.dim() != model.arch().input_dim {
            return Err(Error::Dimension("grid does not match network input".into()));
        }
        Ok(Self {
            model,
            anchor,
            energy,
            tau,
            grid,
        })
    }

    fn output_grid(&self) -> &Arc<SampleGrid<T>> {
        self.anchor.grid()
    }

    fn check_len(&self, w: &[T]) -> Result<()> {
        if w.len() != self.model.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters, expected {}",
                w.len(),
                self.model.param_count()
            )));
        }
        Ok(())
    }

    fn wrap(&self, values: Vec<T>) -> Result<GridFunction<T>> {
        GridFunction::new(Arc::clone(self.output_grid()), values)
    }

    fn objective_of_output(&self, u: &GridFunction<T>) -> Result<T> {
        let d = crate::hilbert::norm(&u.sub(self.anchor)?);
        Ok(d * d / (self.tau + self.tau) + self.energy.value(u)?)
    }

    /// `r = (u - u^n)/tau + grad F[u]`
    fn residual(&self, u: &GridFunction<T>) -> Result<GridFunction<T>> {
        let g = self.energy.gradient(u)?;
        let inv = T::one() / self.tau;
        let diff = u.sub(self.anchor)?;
        diff.lin_comb(inv, &g, T::one())
    }

    fn linearize(&self, w: &[T]) -> Result<Linearization<T>> {
        let model = self.model.with_params(w.to_vec())?;
        let (values, jac) = model.forward_and_jacobian(self.grid)?;
        let u = self.wrap(values)?;
        let objective = self.objective_of_output(&u)?;
        let r = self.residual(&u)?;
        let weights = self.output_grid().weights();
        let wr: Vec<T> = r.values().iter().zip(weights).map(|(&a, &b)| a * b).collect();
        let gradient = jac.t_matvec(&wr);
        Ok(Linearization {
            jac,
            residual: r.into_values(),
            gradient,
            objective,
        })
    }

    /// Grid weights divided by their mean.
    fn normalized_weights(&self) -> Vec<T> {
        let g = self.output_grid();
        let mean = g.mean_weight();
        g.weights().iter().map(|&w| w / mean).collect()
    }

    /// Scalar in front of `J^T W J` in the Gauss-Newton system.
    pub fn curvature_scale(&self) -> T {
        T::one() / self.tau + self.energy.gradient_lipschitz()
    }
}

struct Linearization<T> {
    jac: DenseMatrix<T>,
    residual: Vec<T>,
    gradient: Vec<T>,
    objective: T,
}

/// `J^n(w)`; equals `F[u^n]` at the warm start.
pub fn subproblem_objective<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    w: &[T],
) -> Result<T> {
    spec.check_len(w)?;
    let values = spec.model.with_params(w.to_vec())?.forward_raw(spec.grid)?;
    spec.objective_of_output(&spec.wrap(values)?)
}

/// Parameter gradient `J^T diag(w) r` of [`subproblem_objective`].
pub fn subproblem_gradient<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    w: &[T],
) -> Result<Vec<T>> {
    spec.check_len(w)?;
    Ok(spec.linearize(w)?.gradient)
}

/// Diagnostics for one inner step (shared by all inner solvers).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerStepRecord<T> {
    pub step: usize,
    /// Objective before the step.
    pub objective: T,
    pub objective_after: T,
    pub grad_norm: T,
    pub cg_iters: usize,
    pub cg_residual: T,
    pub cg_converged: bool,
    pub negative_curvature: bool,
    /// Accepted line-search step; 1 for first-order updates.
    pub accepted_t: T,
    pub line_search_evals: usize,
    pub rejected: bool,
    /// Norm of the search direction (first-order: of the applied update).
    pub direction_norm: T,
}

/// Inner solve result.
#[derive(Debug, Clone)]
pub struct InnerSolve<T> {
    pub params: Vec<T>,
    pub trace: Vec<InnerStepRecord<T>>,
}

impl<T: Real> InnerSolve<T> {
    pub fn final_objective(&self) -> Option<T> {
        self.trace.last().map(|r| r.objective_after)
    }
}

/// One damped Gauss-Newton step with backtracking on the full objective.
/// A rejected line search leaves `w` unchanged and is not an error.
pub fn gn_step<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    cfg: &GnConfig<T>,
    w: &[T],
) -> Result<(Vec<T>, InnerStepRecord<T>)> {
    cfg.validate()?;
    spec.check_len(w)?;
    let lin = spec.linearize(w)?;
    let scale = spec.curvature_scale();
    let wt = spec.normalized_weights();
    let rhs: Vec<T> = {
        let wr: Vec<T> = lin.residual.iter().zip(&wt).map(|(&r, &q)| -r * q).collect();
        lin.jac.t_matvec(&wr)
    };
    let grad_norm = norm2(&lin.gradient);
    let mut record = InnerStepRecord {
        step: 0,
        objective: lin.objective,
        objective_after: lin.objective,
        grad_norm,
        cg_iters: 0,
        cg_residual: T::zero(),
        cg_converged: true,
        negative_curvature: false,
        accepted_t: T::zero(),
        line_search_evals: 0,
        rejected: false,
        direction_norm: T::zero(),
    };
    if !all_finite(&rhs) {
        return Err(Error::Solver {
            step: 0,
            message: "non-finite Gauss-Newton right-hand side".into(),
        });
    }
    let damping = cfg.lm_damping;
    let mut tmp = vec![T::zero(); lin.jac.rows()];
    let sol = cg_solve(
        |z: &[T], out: &mut [T]| {
            lin.jac.matvec_into(z, &mut tmp);
            tmp.iter_mut().zip(&wt).for_each(|(t, &q)| *t *= q);
            lin.jac.t_matvec_into(&tmp, out);
            for (o, &zi) in out.iter_mut().zip(z) {
                *o = scale * *o + damping * zi;
            }
        },
        &rhs,
        &cfg.cg,
    )
    .map_err(|e| Error::Solver {
        step: 0,
        message: format!("conjugate gradients failed: {e}"),
    })?;
    record.cg_iters = sol.iters;
    record.cg_residual = sol.residual_norm;
    record.cg_converged = sol.converged;
    record.negative_curvature = sol.negative_curvature;
    let eta = sol.solution;
    let eta_norm = norm2(&eta);
    record.direction_norm = eta_norm;
    if eta_norm == T::zero() {
        return Ok((w.to_vec(), record));
    }

    let trial = |t: T| -> Vec<T> { w.iter().zip(&eta).map(|(&a, &d)| a + t * d).collect() };
    let ls = backtrack_from(
        lin.objective,
        |t| subproblem_objective(spec, &trial(t)).unwrap_or(T::nan()),
        eta_norm,
        &cfg.line_search,
    )?;
    record.line_search_evals = ls.evals;
    record.rejected = ls.rejected;
    if ls.rejected {
        return Ok((w.to_vec(), record));
    }
    record.accepted_t = ls.t;
    record.objective_after = ls.value;
    Ok((trial(ls.t), record))
}

/// Applies [`gn_step`] `cfg.inner_steps` times from the warm start.
pub fn solve_subproblem_gn<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    cfg: &GnConfig<T>,
) -> Result<InnerSolve<T>> {
    cfg.validate()?;
    let mut w = spec.model.params().to_vec();
    let mut trace = Vec::with_capacity(cfg.inner_steps);
    for k in 0..cfg.inner_steps {
        let (next, mut rec) = gn_step(spec, cfg, &w).map_err(|e| match e {
            Error::Solver { message, .. } => Error::Solver { step: k, message },
            other => other,
        })?;
        rec.step = k;
        trace.push(rec);
        w = next;
    }
    Ok(InnerSolve { params: w, trace })
}

/// The two raw Gauss-Newton directions from exact dense solves (no damping):
/// `-(J^T W J)^{-1} J^T W r` and `-((1/tau + c) J^T W J)^{-1} J^T W r`.
///
/// Both are computed as least-squares problems in `W^{1/2} J` by QR, so the
/// accuracy depends on the condition number of `J` rather than of `J^T W J`.
pub fn gn_directions_dense<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    w: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    spec.check_len(w)?;
    let lin = spec.linearize(w)?;
    let sqrt_w: Vec<T> = spec.normalized_weights().iter().map(|q| q.sqrt()).collect();
    let a = lin.jac.scale_rows(&sqrt_w);
    let b: Vec<T> = lin.residual.iter().zip(&sqrt_w).map(|(&r, &q)| -r * q).collect();
    let pure = least_squares(&a, &b)?;
    let root = spec.curvature_scale().sqrt();
    let scaled_a = a.scale_rows(&vec![root; a.rows()]);
    let scaled_b: Vec<T> = b.iter().map(|&x| x / root).collect();
    let preconditioned = least_squares(&scaled_a, &scaled_b)?;
    Ok((pure, preconditioned))
}

/// Bias-corrected Adam moments for a parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    cfg: AdamConfig<T>,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig<T>, len: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        })
    }

    /// Updates `params` in place and returns the norm of the applied update.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> T {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            ..
        } = self.cfg;
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let mut sq = T::zero();
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let delta = lr * m_hat / (v_hat.sqrt() + eps);
            params[i] -= delta;
            sq += delta * delta;
        }
        sq.sqrt()
    }
}

fn first_order_record<T: Real>(k: usize, before: T, after: T, grad_norm: T, step: T) -> InnerStepRecord<T> {
    InnerStepRecord {
        step: k,
        objective: before,
        objective_after: after,
        grad_norm,
        cg_iters: 0,
        cg_residual: T::zero(),
        cg_converged: true,
        negative_curvature: false,
        accepted_t: T::one(),
        line_search_evals: 0,
        rejected: false,
        direction_norm: step,
    }
}

fn first_order_loop<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    iters: usize,
    mut update: impl FnMut(&mut [T], &[T]) -> T,
) -> Result<InnerSolve<T>> {
    let mut w = spec.model.params().to_vec();
    let mut trace = Vec::with_capacity(iters);
    let mut lin = spec.linearize(&w)?;
    for k in 0..iters {
        if !all_finite(&lin.gradient) {
            return Err(Error::Solver {
                step: k,
                message: "non-finite gradient".into(),
            });
        }
        let before = lin.objective;
        let grad_norm = norm2(&lin.gradient);
        let step = update(&mut w, &lin.gradient);
        lin = spec.linearize(&w)?;
        if !lin.objective.is_finite() {
            return Err(Error::Solver {
                step: k,
                message: "objective diverged".into(),
            });
        }
        trace.push(first_order_record(k, before, lin.objective, grad_norm, step));
    }
    Ok(InnerSolve { params: w, trace })
}

/// Adam on the subproblem objective from the warm start.
pub fn solve_subproblem_adam<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    cfg: &AdamConfig<T>,
) -> Result<InnerSolve<T>> {
    let mut state = AdamState::new(*cfg, spec.model.param_count())?;
    first_order_loop(spec, cfg.inner_iters, |w, g| state.step(w, g))
}

/// Plain gradient descent `w <- w - lr * grad J^n(w)`.
pub fn solve_subproblem_gd<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    cfg: &GdConfig<T>,
) -> Result<InnerSolve<T>> {
    if !(cfg.learning_rate >= T::zero()) {
        return Err(Error::Parameter("learning rate must be >= 0".into()));
    }
    let lr = cfg.learning_rate;
    first_order_loop(spec, cfg.inner_iters, |w, g| {
        for (wi, &gi) in w.iter_mut().zip(g) {
            *wi -= lr * gi;
        }
        lr * norm2(g)
    })
}

/// Writes `step,objective,grad_norm,cg_iters,cg_residual,accepted_t,direction_norm`.
pub fn write_trace_csv<T: Real, W: Write>(trace: &[InnerStepRecord<T>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "step",
        "objective",
        "grad_norm",
        "cg_iters",
        "cg_residual",
        "accepted_t",
        "direction_norm",
    ])?;
    for r in trace {
        w.write_record([
            r.step.to_string(),
            fmt_real(r.objective),
            fmt_real(r.grad_norm),
            r.cg_iters.to_string(),
            fmt_real(r.cg_residual),
            fmt_real(r.accepted_t),
            fmt_real(r.direction_norm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Directional derivative of the objective along `eta`; negative for a descent direction.
pub fn directional_derivative<T: Real, E: EnergyFunctional<T> + ?Sized>(
    spec: &SubproblemSpec<'_, T, E>,
    w: &[T],
    eta: &[T],
) -> Result<T> {
    Ok(dot(&subproblem_gradient(spec, w)?, eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{LogCoshRegressionEnergy, QuadraticRegressionEnergy};
    use crate::network::MlpArchitecture;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(n: usize, d: usize, seed: u64) -> Arc<SampleGrid<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(
            SampleGrid::uniform(
                (0..n)
                    .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
            )
            .unwrap(),
        )
    }

    /// `u_w = b` at the single point `x = 0`: the objective is a scalar
    /// function of the bias alone.
    fn scalar_setup(
        anchor: f64,
        target: f64,
    ) -> (
        MlpModel<f64>,
        Arc<SampleGrid<f64>>,
        GridFunction<f64>,
        QuadraticRegressionEnergy<f64>,
    ) {
        let grid = Arc::new(SampleGrid::uniform(vec![vec![0.0]]).unwrap());
        let model = MlpModel::new(MlpArchitecture::new(1, vec![], 1).unwrap(), vec![0.0, anchor]).unwrap();
        let a = GridFunction::new(Arc::clone(&grid), vec![anchor]).unwrap();
        let e = QuadraticRegressionEnergy::new(GridFunction::new(Arc::clone(&grid), vec![target]).unwrap());
        (model, grid, a, e)
    }

    #[test]
    fn objective_examples() {
        let (model, grid, anchor, energy) = scalar_setup(0.0, 2.0);
        let spec = SubproblemSpec::new(&model, &anchor, &energy, 1.0, &grid).unwrap();
        assert_eq!(subproblem_objective(&spec, &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(
            subproblem_objective(&spec, model.params()).unwrap(),
            energy.value(&anchor).unwrap()
        );

        let g = random_grid(20, 2, 1);
        let net = MlpModel::initialize(MlpArchitecture::new(2, vec![6], 1).unwrap(), 3).unwrap();
        let u = net.forward(&g).unwrap();
        let e = QuadraticRegressionEnergy::new(u.clone());
        let spec = SubproblemSpec::new(&net, &u, &e, 0.1, &g).unwrap();
        assert_eq!(subproblem_objective(&spec, net.params()).unwrap(), 0.0);
    }

    #[test]
    fn warm_start_is_enforced() {
        let (model, grid, _, energy) = scalar_setup(0.0, 2.0);
        let wrong = GridFunction::new(Arc::clone(&grid), vec![1.0]).unwrap();
        assert!(matches!(
            SubproblemSpec::new(&model, &wrong, &energy, 1.0, &grid),
            Err(Error::Precondition(_))
        ));
        assert!(SubproblemSpec::unchecked(&model, &wrong, &energy, 0.0, &grid).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = random_grid(15, 1, 2);
        let net = MlpModel::initialize(MlpArchitecture::new(1, vec![4], 1).unwrap(), 5).unwrap();
        let u = net.forward(&g).unwrap();
        let target = GridFunction::from_fn(Arc::clone(&g), |x| x[0].sin());
        let e = LogCoshRegressionEnergy::new(target, 0.5).unwrap();
        let spec = SubproblemSpec::new(&net, &u, &e, 0.3, &g).unwrap();
        let mut w = net.params().to_vec();
        w[0] += 0.2;
        let grad = subproblem_gradient(&spec, &w).unwrap();
        for k in 0..w.len() {
            let h = 1e-6;
            let mut wp = w.clone();
            wp[k] += h;
            let mut wm = w.clone();
            wm[k] -= h;
            let fd =
                (subproblem_objective(&spec, &wp).unwrap() - subproblem_objective(&spec, &wm).unwrap()) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7 * grad[k].abs().max(1.0));
        }
    }

    fn linear_problem(
        seed: u64,
        n: usize,
        d: usize,
    ) -> (
        MlpModel<f64>,
        Arc<SampleGrid<f64>>,
        GridFunction<f64>,
        QuadraticRegressionEnergy<f64>,
    ) {
        let g = random_grid(n, d, seed);
        let model = MlpModel::initialize(
            MlpArchitecture::new(d, vec![], 1)
                .unwrap()
                .with_init(crate::network::Init::SmallUniform),
            seed,
        )
        .unwrap();
        let anchor = model.forward(&g).unwrap();
        let target = GridFunction::from_fn(Arc::clone(&g), |x| x.iter().map(|v| (2.0 * v).sin()).sum::<f64>());
        (model, g, anchor, QuadraticRegressionEnergy::new(target))
    }

    fn least_squares_oracle(
        g: &SampleGrid<f64>,
        anchor: &GridFunction<f64>,
        target: &GridFunction<f64>,
        tau: f64,
    ) -> Vec<f64> {
        let d = g.dim();
        let phi = DMatrix::from_fn(g.len(), d + 1, |i, j| if j < d { g.point(i)[j] } else { 1.0 });
        let rhs_vec = DVector::from_fn(g.len(), |i, _| anchor.values()[i] / tau + target.values()[i]);
        let lhs = (1.0 + 1.0 / tau) * phi.transpose() * &phi;
        let rhs = phi.transpose() * rhs_vec;
        lhs.lu().solve(&rhs).unwrap().iter().copied().collect()
    }

    fn exact_cfg(p: usize) -> GnConfig<f64> {
        GnConfig {
            inner_steps: 1,
            lm_damping: 0.0,
            cg: CgConfig {
                max_iters: 4 * p,
                rel_tolerance: 1e-14,
            },
            line_search: LineSearchConfig {
                max_step_norm: 1e12,
                ..Default::default()
            },
        }
    }

    #[test]
    fn gn_is_exact_on_linear_models() {
        let tau = 0.1;
        let (model, g, anchor, energy) = linear_problem(3, 100, 19);
        let spec = SubproblemSpec::new(&model, &anchor, &energy, tau, &g).unwrap();
        let cfg = exact_cfg(model.param_count());
        let (w, rec) = gn_step(&spec, &cfg, model.params()).unwrap();
        assert_eq!(rec.accepted_t, 1.0);
        let oracle = least_squares_oracle(&g, &anchor, energy.target(), tau);
        let dist = w.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= 1e-8, "distance {dist}");
        assert!(norm2(&subproblem_gradient(&spec, &w).unwrap()) <= 1e-8);

        let solve = solve_subproblem_gn(&spec, &cfg).unwrap();
        assert_eq!(solve.params, w);
    }

    #[test]
    fn gn_fixed_point() {
        let tau = 0.5;
        let (model, g, anchor, energy) = linear_problem(4, 30, 2);
        let oracle = least_squares_oracle(&g, &anchor, energy.target(), tau);
        let at_min = model.with_params(oracle.clone()).unwrap();
        // Keep the anchor from the original model; start at the minimizer.
        let spec = SubproblemSpec::unchecked(&at_min, &anchor, &energy, tau, &g).unwrap();
        let (w, rec) = gn_step(&spec, &exact_cfg(3), &oracle).unwrap();
        assert!(rec.direction_norm < 1e-12);
        let moved = w.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved < 1e-12);
    }

    #[test]
    fn gn_monotone_on_tanh_net() {
        let g = random_grid(64, 1, 8);
        let net = MlpModel::initialize(MlpArchitecture::new(1, vec![16], 1).unwrap(), 0).unwrap();
        let u = net.forward(&g).unwrap();
        let energy = QuadraticRegressionEnergy::new(GridFunction::from_fn(Arc::clone(&g), |x| (3.0 * x[0]).cos()));
        let spec = SubproblemSpec::new(&net, &u, &energy, 0.1, &g).unwrap();
        let cfg = GnConfig {
            inner_steps: 8,
            ..Default::default()
        };
        let solve = solve_subproblem_gn(&spec, &cfg).unwrap();
        assert_eq!(solve.trace[0].objective, energy.value(&u).unwrap());
        for r in &solve.trace {
            assert!(r.objective_after <= r.objective);
            if !r.rejected && r.direction_norm > 0.0 {
                assert!(r.objective_after < r.objective);
            }
        }
        for pair in solve.trace.windows(2) {
            assert_eq!(pair[0].objective_after, pair[1].objective);
        }
    }

    #[test]
    fn preconditioner_scaling() {
        let g = random_grid(40, 2, 9);
        let net = MlpModel::initialize(MlpArchitecture::new(2, vec![3], 1).unwrap(), 1).unwrap();
        let u = net.forward(&g).unwrap();
        let energy = QuadraticRegressionEnergy::new(GridFunction::from_fn(Arc::clone(&g), |x| x[0] * x[1]));
        let tau = 0.25;
        let spec = SubproblemSpec::new(&net, &u, &energy, tau, &g).unwrap();
        let (pure, pre) = gn_directions_dense(&spec, net.params()).unwrap();
        let ratio = 1.0 / (1.0 + 1.0 / tau);
        for (a, b) in pure.iter().zip(&pre) {
            assert!((b - ratio * a).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn adam_hand_example() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, 1).unwrap();
        let mut w = [1.0f64];
        let grad = [2.0 * w[0]];
        st.step(&mut w, &grad);
        assert!((w[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert!((w[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        // Anchor and target both equal the model output: the residual is exactly zero.
        let g = random_grid(25, 2, 6);
        let model = MlpModel::initialize(MlpArchitecture::new(2, vec![], 1).unwrap(), 6).unwrap();
        let u = model.forward(&g).unwrap();
        let energy = QuadraticRegressionEnergy::new(u.clone());
        let spec = SubproblemSpec::new(&model, &u, &energy, 0.5, &g).unwrap();
        let out = solve_subproblem_adam(
            &spec,
            &AdamConfig {
                inner_iters: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.params, model.params());
    }

    #[test]
    fn adam_reaches_quadratic_minimum() {
        let tau = 1.0;
        let (model, g, anchor, energy) = linear_problem(7, 30, 1);
        let spec = SubproblemSpec::new(&model, &anchor, &energy, tau, &g).unwrap();
        let oracle = least_squares_oracle(&g, &anchor, energy.target(), tau);
        let best = subproblem_objective(&spec, &oracle).unwrap();
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            inner_iters: 5000,
            ..Default::default()
        };
        let out = solve_subproblem_adam(&spec, &cfg).unwrap();
        assert!(out.final_objective().unwrap() - best <= 1e-6);
    }

    #[test]
    fn gd_examples() {
        let (model, grid, anchor, energy) = scalar_setup(0.0, 0.0);
        let w0 = model.with_params(vec![0.0, 1.0]).unwrap();
        let spec = SubproblemSpec::unchecked(&w0, &anchor, &energy, 1.0, &grid).unwrap();
        let out = solve_subproblem_gd(
            &spec,
            &GdConfig {
                learning_rate: 0.5,
                inner_iters: 1,
            },
        )
        .unwrap();
        assert_eq!(out.params, vec![0.0, 0.0]);

        let out = solve_subproblem_gd(
            &spec,
            &GdConfig {
                learning_rate: 0.0,
                inner_iters: 3,
            },
        )
        .unwrap();
        assert_eq!(out.params, w0.params());

        let lr = 0.2;
        let out = solve_subproblem_gd(
            &spec,
            &GdConfig {
                learning_rate: lr,
                inner_iters: 6,
            },
        )
        .unwrap();
        assert!((out.params[1].abs() - (1.0f64 - 2.0 * lr).abs().powi(6)).abs() < 1e-15);
        let _ = model;
    }

    #[test]
    fn trace_csv_has_documented_columns() {
        let (model, grid, anchor, energy) = scalar_setup(1.0, 0.0);
        let spec = SubproblemSpec::new(&model, &anchor, &energy, 1.0, &grid).unwrap();
        let out = solve_subproblem_gn(&spec, &GnConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&out.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,objective,grad_norm,cg_iters,cg_residual,accepted_t,direction_norm\n"));
        assert_eq!(text.lines().count(), 6);
    }

    proptest! {
        #[test]
        fn gn_direction_descends(seed in 0u64..300, tau in 0.01f64..2.0) {
            let g = random_grid(30, 1, seed);
            let net = MlpModel::initialize(MlpArchitecture::new(1, vec![4], 1).unwrap(), seed).unwrap();
            let u = net.forward(&g).unwrap();
            let energy = QuadraticRegressionEnergy::new(GridFunction::from_fn(Arc::clone(&g), |x| x[0].exp()));
            let spec = SubproblemSpec::new(&net, &u, &energy, tau, &g).unwrap();
            let cfg = GnConfig { lm_damping: 1e-6, inner_steps: 1, ..Default::default() };
            let grad = subproblem_gradient(&spec, net.params()).unwrap();
            prop_assume!(norm2(&grad) > 1e-10);
            let (w, rec) = gn_step(&spec, &cfg, net.params()).unwrap();
            let eta: Vec<f64> = if rec.accepted_t > 0.0 {
                w.iter().zip(net.params()).map(|(a, b)| (a - b) / rec.accepted_t).collect()
            } else {
                let (_, pre) = gn_directions_dense(&spec, net.params()).unwrap();
                pre
            };
            prop_assert!(directional_derivative(&spec, net.params(), &eta).unwrap() < 0.0);
            if !rec.rejected {
                prop_assert!(rec.objective_after < rec.objective);
            }
        }
    }
}
