//! Constants of the convergence theory and post-hoc certificates.
//!
//! Everything network-dependent here is an empirical surrogate: the
//! non-degeneracy constant is read off the current Jacobian, the Jacobian
//! Lipschitz constant is a sampled lower estimate, and the network
//! Lipschitz constant is replaced by the Jacobian operator norm.
//!
//! Not checked (not computable from samples): geodesic convexity of the
//! increment functional, the injectivity-radius hypothesis, and the output
//! isolation radii.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::hilbert::{check_tau, distance, exact_prox, fmt_real, EnergyFunctional, GridFunction, SampleGrid};
use crate::network::{
    estimate_jacobian_lipschitz, min_singular_value, weighted_min_singular_value, weighted_op_norm, MlpModel,
};
use crate::scalar::Real;

/// Knobs for [`constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryOptions<T> {
    /// Perturbation pairs for the Jacobian-Lipschitz estimate; 0 disables it.
    pub lipschitz_samples: usize,
    pub lipschitz_radius: T,
    /// Network approximation error (user supplied).
    pub epsilon: T,
    /// Target tracking accuracy; needed only for the horizon thresholds.
    pub delta: Option<T>,
    pub seed: u64,
}

impl<T: Real> Default for TheoryOptions<T> {
    fn default() -> Self {
        Self {
            lipschitz_samples: 64,
            lipschitz_radius: T::lit(1e-2),
            epsilon: T::zero(),
            delta: None,
            seed: 0,
        }
    }
}

/// Raw measurements from which [`TheoryConstants`] are assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryInputs<T> {
    pub tau: T,
    pub m_f: T,
    pub l_f: T,
    /// `F[v]`
    pub energy: T,
    /// `||J_tau(v) - v||`
    pub h_star_norm: T,
    /// `sigma_min(J)` with Euclidean rows.
    pub s_min: T,
    /// `sigma_min(diag(w)^{1/2} J)`, the Jacobian as a map into the weighted space.
    pub gram_s_min: T,
    /// `||diag(w)^{1/2} J||_op`
    pub jac_op_norm: T,
    /// Substitute for the network Lipschitz constant.
    pub lip_u: T,
    pub l_hat: Option<T>,
    pub epsilon: T,
    pub delta: Option<T>,
}

/// The constant pack for one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants<T> {
    pub tau: T,
    pub m_f: T,
    pub l_f: T,
    /// `1/tau + m_F`
    pub nu: T,
    /// `1/tau + L_F`
    pub mu: T,
    /// `mu / nu`
    pub kappa: T,
    /// `1 / (1 + tau m_F)`
    pub rho: T,
    pub s_min: T,
    pub gram_s_min: T,
    /// `gram_s_min / 2`
    pub lambda_hat: T,
    pub l_hat: Option<T>,
    pub jac_op_norm: T,
    pub lip_u: T,
    /// Ball radius on which the Gram lower bound is guaranteed (empirical).
    pub r_w: Option<T>,
    /// `2 L / lambda^2`
    pub big_lambda: Option<T>,
    /// `sqrt(2 tau F[v] / (1 + tau m_F))`
    pub k_v: T,
    pub h_star_norm: T,
    /// `(4 L kappa / lambda^2) max(h*, K_v)`; at most 1 is the data condition.
    pub c_v: Option<T>,
    /// Set when `lambda_hat = 0`.
    pub degenerate: bool,
    pub epsilon: T,
    pub delta: Option<T>,
}

/// Contraction factor `1/(1 + tau m_F)` of the proximal map.
pub fn contraction_factor<T: Real>(tau: T, m_f: T) -> T {
    T::one() / (T::one() + tau * m_f)
}

impl<T: Real> TheoryConstants<T> {
    /// Pure assembly from measured inputs.
    pub fn from_inputs(x: &TheoryInputs<T>) -> Result<Self> {
        check_tau(x.tau)?;
        if !(x.m_f > T::zero()) {
            return Err(Error::Precondition("theory constants need m_F > 0".into()));
        }
        if !(x.l_f >= x.m_f) {
            return Err(Error::Parameter("L_F must be >= m_F".into()));
        }
        if !(x.energy >= T::zero()) {
            return Err(Error::Input("energy value must be nonnegative".into()));
        }
        let inv_tau = T::one() / x.tau;
        let nu = inv_tau + x.m_f;
        let mu = inv_tau + x.l_f;
        let kappa = mu / nu;
        let one_tm = T::one() + x.tau * x.m_f;
        let rho = T::one() / one_tm;
        let lambda = x.gram_s_min / T::lit(2.0);
        let degenerate = lambda == T::zero();
        let k_v = (T::lit(2.0) * x.tau * x.energy / one_tm).sqrt();
        let lam2 = lambda * lambda;
        let (r_w, big_lambda, c_v) = match x.l_hat {
            None => (None, None, None),
            Some(l) => {
                let r_w = if degenerate {
                    T::zero()
                } else if l == T::zero() {
                    T::infinity()
                } else {
                    let a = lambda / l;
                    let jn = x.jac_op_norm;
                    let b = lam2 / (T::lit(2.0) * l * ((jn * jn + lam2).sqrt() + jn));
                    let c = if x.lip_u > T::zero() {
                        lam2 * one_tm / (T::lit(4.0) * l * x.lip_u * (T::one() + x.tau * x.l_f))
                    } else {
                        T::infinity()
                    };
                    a.min(b).min(c)
                };
                let big_lambda = if degenerate {
                    T::infinity()
                } else {
                    T::lit(2.0) * l / lam2
                };
                let c_v = if degenerate {
                    T::infinity()
                } else {
                    T::lit(4.0) * l * kappa / lam2 * x.h_star_norm.max(k_v)
                };
                (Some(r_w), Some(big_lambda), Some(c_v))
            }
        };
        Ok(Self {
            tau: x.tau,
            m_f: x.m_f,
            l_f: x.l_f,
            nu,
            mu,
            kappa,
            rho,
            s_min: x.s_min,
            gram_s_min: x.gram_s_min,
            lambda_hat: lambda,
            l_hat: x.l_hat,
            jac_op_norm: x.jac_op_norm,
            lip_u: x.lip_u,
            r_w,
            big_lambda,
            k_v,
            h_star_norm: x.h_star_norm,
            c_v,
            degenerate,
            epsilon: x.epsilon,
            delta: x.delta,
        })
    }

    /// Whether the data condition `C_v <= 1` holds (unknown without `L_hat`).
    pub fn data_condition(&self) -> Option<bool> {
        self.c_v.map(|c| c <= T::one())
    }

    fn log_argument(&self, scale: T) -> Result<T> {
        let delta = self
            .delta
            .ok_or_else(|| Error::Precondition("target accuracy delta is not set".into()))?;
        let eps = self.epsilon;
        let tm = self.tau * self.m_f;
        let den = tm * (delta - eps) - eps;
        if !(den > T::zero()) {
            return Err(Error::Precondition(format!(
                "need epsilon < tau m_F delta / (1 + tau m_F): tau m_F (delta - epsilon) - epsilon = {den}"
            )));
        }
        Ok(scale * (T::one() + tm) / den)
    }
}

/// Measures the inputs at iterate `v = u_NN(w)` and assembles the constants.
/// `lip_u` overrides the network-Lipschitz substitute (defaults to the
/// current weighted Jacobian norm).
pub fn constants<T: Real, E: EnergyFunctional<T> + ?Sized>(
    tau: T,
    energy: &E,
    v: &GridFunction<T>,
    model: &MlpModel<T>,
    grid: &SampleGrid<T>,
    opts: &TheoryOptions<T>,
    lip_u: Option<T>,
) -> Result<TheoryConstants<T>> {
    check_tau(tau)?;
    let jac = model.jacobian(grid)?;
    if jac.rows() != v.len() {
        return Err(Error::Dimension("iterate does not match the network output".into()));
    }
    let weights = v.grid().weights();
    let prox = exact_prox(v, tau, energy)?;
    let jac_op_norm = weighted_op_norm(&jac, weights);
    let l_hat = if opts.lipschitz_samples > 0 {
        Some(estimate_jacobian_lipschitz(model, grid, opts.lipschitz_samples, opts.lipschitz_radius, opts.seed)?.value)
    } else {
        None
    };
    TheoryConstants::from_inputs(&TheoryInputs {
        tau,
        m_f: energy.strong_convexity(),
        l_f: energy.gradient_lipschitz(),
        energy: energy.value(v)?,
        h_star_norm: distance(&prox, v)?,
        s_min: min_singular_value(&jac)?,
        gram_s_min: weighted_min_singular_value(&jac, weights)?,
        jac_op_norm,
        lip_u: lip_u.unwrap_or(jac_op_norm).max(jac_op_norm),
        l_hat,
        epsilon: opts.epsilon,
        delta: opts.delta,
    })
}

/// A threshold with a note when the logarithm's argument was below one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold<T> {
    pub value: T,
    pub clamped: bool,
}

/// Inner flow time `(2/nu) log(Cbar (1 + tau m_F) / (tau m_F (delta - eps) - eps))`,
/// clamped at zero.
#[allow(non_snake_case)]
pub fn inner_horizon_T<T: Real>(cbar: T, c: &TheoryConstants<T>) -> Result<Threshold<T>> {
    let arg = c.log_argument(cbar)?;
    if arg < T::one() {
        return Ok(Threshold {
            value: T::zero(),
            clamped: true,
        });
    }
    Ok(Threshold {
        value: T::lit(2.0) / c.nu * arg.ln(),
        clamped: false,
    })
}

/// Inner step count `ceil(log(Dbar (1 + tau m_F)/(tau m_F (delta - eps) - eps)) / log(1/q))`
/// with `q = sqrt(1 - nu eta / 2)`, floored at zero. Requires `0 < eta <= 2/(3 mu)`.
#[allow(non_snake_case)]
pub fn inner_iters_K<T: Real>(dbar: T, eta: T, c: &TheoryConstants<T>) -> Result<usize> {
    let bound = T::lit(2.0) / (T::lit(3.0) * c.mu);
    if !(eta > T::zero() && eta <= bound * (T::one() + T::epsilon() * T::lit(4.0))) {
        return Err(Error::Parameter(format!(
            "step eta = {eta} outside (0, 2/(3 mu)] = (0, {bound}]"
        )));
    }
    let arg = c.log_argument(dbar)?;
    if arg <= T::one() {
        return Ok(0);
    }
    let q2 = T::one() - c.nu * eta / T::lit(2.0);
    // log(1/q) = -log(1 - nu eta / 2) / 2
    let log_inv_q = -(-(c.nu * eta / T::lit(2.0))).ln_1p() / T::lit(2.0);
    debug_assert!(q2 > T::zero());
    let k = (arg.ln() / log_inv_q).ceil();
    Ok(k.to_usize().unwrap_or(usize::MAX))
}

/// Default flow-gap proxy `sqrt(4 F[u^n] / nu)`.
pub fn default_dbar<T: Real>(energy_value: T, nu: T) -> T {
    (T::lit(4.0) * energy_value / nu).sqrt()
}

/// Largest `tau` with `rho >= 2 tau g / (1 + tau m_F)`, or `+inf` when the
/// inequality holds for every `tau`.
pub fn locality_threshold<T: Real>(rho_isolation: T, grad_norm: T, m_f: T) -> T {
    let two_g = T::lit(2.0) * grad_norm;
    if rho_isolation * m_f >= two_g {
        T::infinity()
    } else {
        rho_isolation / (two_g - rho_isolation * m_f)
    }
}

/// `rho^n e_0 + n eta_0 rho^(n-1) + eps (1 - rho^n)/(1 - rho)`
pub fn geometric_tracking_bound<T: Real>(e0: T, eta0: T, rho: T, epsilon: T, n: usize) -> T {
    let rn = rho.powi(n as i32);
    let drift = if n == 0 {
        T::zero()
    } else {
        T::from_count(n) * eta0 * rho.powi(n as i32 - 1)
    };
    let accum = if rho == T::one() {
        epsilon * T::from_count(n)
    } else {
        epsilon * (T::one() - rn) / (T::one() - rho)
    };
    rn * e0 + drift + accum
}

/// Round-off allowance for an inequality with right side `rhs`.
pub fn float_slack<T: Real>(rhs: T) -> T {
    T::lit(64.0) * T::epsilon() * T::one().max(rhs.abs())
}

/// Per-step check of `e_{n+1} <= rho e_n + res_n + eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCheck<T> {
    pub step: usize,
    pub error_start: T,
    pub error_end: T,
    pub inner_residual: T,
    pub bound: T,
    pub pass: bool,
}

/// Check of `||u^n_NN - u*|| <= sup_m e_m + rho^n ||u^0 - u*||` for `n >= 1`,
/// with `u^0` the start of the exact trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalCheck<T> {
    pub step: usize,
    pub dist_to_min: T,
    pub bound: T,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingCertificate<T> {
    pub rho: T,
    pub epsilon: T,
    pub steps: Vec<StepCheck<T>>,
    pub global: Vec<GlobalCheck<T>>,
    pub sup_error: T,
    pub passed: bool,
}

/// Tracking errors along a run of the scheme, as recorded per outer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingRow<T> {
    pub step: usize,
    /// `e_n`
    pub tracking_error_start: T,
    /// `e_{n+1}`
    pub tracking_error: T,
    /// `||u^{n+1}_NN - J_tau(u^n_NN)||`
    pub inner_residual: T,
    /// `||u^{n+1}_NN - u*||`
    pub dist_to_min: Option<T>,
    /// `||u^0 - u*||` for the exact trajectory's start.
    pub initial_dist_to_min: Option<T>,
    /// Weighted `sigma_min(J(w^n))`.
    pub gram_s_min: T,
    /// `||w^{n+1} - w^n||`
    pub param_step_norm: T,
}

fn assemble<T: Real>(rho: T, epsilon: T, rows: &[TrackingRow<T>]) -> TrackingCertificate<T> {
    let mut sup_error = rows.first().map_or(T::zero(), |r| r.tracking_error_start);
    let steps: Vec<StepCheck<T>> = rows
        .iter()
        .map(|r| {
            sup_error = sup_error.max(r.tracking_error);
            let bound = rho * r.tracking_error_start + r.inner_residual + epsilon;
            StepCheck {
                step: r.step,
                error_start: r.tracking_error_start,
                error_end: r.tracking_error,
                inner_residual: r.inner_residual,
                bound,
                pass: r.tracking_error <= bound + float_slack(bound),
            }
        })
        .collect();
    let mut global = Vec::new();
    if let Some(d0) = rows.first().and_then(|r| r.initial_dist_to_min) {
        for r in rows {
            if let Some(d) = r.dist_to_min {
                let n = r.step + 1;
                let bound = sup_error + rho.powi(n as i32) * d0;
                global.push(GlobalCheck {
                    step: n,
                    dist_to_min: d,
                    bound,
                    pass: d <= bound + float_slack(bound),
                });
            }
        }
    }
    let passed = steps.iter().all(|s| s.pass) && global.iter().all(|g| g.pass);
    TrackingCertificate {
        rho,
        epsilon,
        steps,
        global,
        sup_error,
        passed,
    }
}

/// Certifies a run from its function iterates `u^0_NN..u^n_NN` against the
/// exact trajectory `u^0..u^n`. The inner residual uses the energy's prox.
pub fn certify_tracking<T: Real, E: EnergyFunctional<T> + ?Sized>(
    iterates: &[GridFunction<T>],
    exact: &[GridFunction<T>],
    energy: &E,
    tau: T,
    epsilon: T,
) -> Result<TrackingCertificate<T>> {
    if iterates.len() != exact.len() {
        return Err(Error::Input(format!(
            "{} iterates but {} exact steps",
            iterates.len(),
            exact.len()
        )));
    }
    if iterates.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    let rho = contraction_factor(tau, energy.strong_convexity());
    let minimizer = energy.minimizer();
    let errors: Vec<T> = iterates
        .iter()
        .zip(exact)
        .map(|(a, b)| distance(a, b))
        .collect::<Result<_>>()?;
    let initial = minimizer.map(|m| distance(&exact[0], m)).transpose()?;
    let mut rows = Vec::with_capacity(iterates.len() - 1);
    for n in 0..iterates.len() - 1 {
        let prox = exact_prox(&iterates[n], tau, energy)?;
        rows.push(TrackingRow {
            step: n,
            tracking_error_start: errors[n],
            tracking_error: errors[n + 1],
            inner_residual: distance(&iterates[n + 1], &prox)?,
            dist_to_min: minimizer.map(|m| distance(&iterates[n + 1], m)).transpose()?,
            initial_dist_to_min: initial,
            gram_s_min: T::nan(),
            param_step_norm: T::nan(),
        });
    }
    let mut cert = assemble(rho, epsilon, &rows);
    if rows.is_empty() {
        cert.sup_error = errors[0];
    }
    Ok(cert)
}

/// Certifies recorded tracking rows (e.g. read back from a trajectory file).
pub fn certify_records<T: Real>(rows: &[TrackingRow<T>], rho: T, epsilon: T) -> Result<TrackingCertificate<T>> {
    if rows.is_empty() {
        return Err(Error::Input("no trajectory rows to certify".into()));
    }
    if !(rho > T::zero() && rho <= T::one()) {
        return Err(Error::Parameter(format!("rho must lie in (0,1], got {rho}")));
    }
    for r in rows {
        let vals = [r.tracking_error_start, r.tracking_error, r.inner_residual];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "row {} lacks finite tracking columns (was a reference attached?)",
                r.step
            )));
        }
    }
    Ok(assemble(rho, epsilon, rows))
}

/// Weyl-proxy budget `lambda_n = lambda_0 - (L/2) sum_{k<n} Delta_k` next to
/// the empirical `sigma_min(J(w^n))/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaBudget<T> {
    /// `lambda_0..lambda_n` (one more entry than there are rows).
    pub proxy: Vec<T>,
    /// Empirical half singular value at `w^n`, when recorded.
    pub empirical: Vec<Option<T>>,
    /// First index with `lambda_n <= 0`.
    pub exhausted_at: Option<usize>,
    /// Indices where a positive proxy exceeds the empirical value.
    pub violations: Vec<usize>,
}

pub fn lambda_budget<T: Real>(rows: &[TrackingRow<T>], lambda0: T, l_hat: T) -> LambdaBudget<T> {
    let mut proxy = Vec::with_capacity(rows.len() + 1);
    proxy.push(lambda0);
    let mut spent = T::zero();
    for r in rows {
        spent += r.param_step_norm;
        proxy.push(lambda0 - l_hat / T::lit(2.0) * spent);
    }
    let mut empirical: Vec<Option<T>> = rows
        .iter()
        .map(|r| r.gram_s_min.is_finite().then(|| r.gram_s_min / T::lit(2.0)))
        .collect();
    empirical.push(None);
    let exhausted_at = proxy.iter().position(|&l| l <= T::zero());
    let violations = proxy
        .iter()
        .zip(&empirical)
        .enumerate()
        .filter_map(|(n, (&p, e))| match e {
            Some(e) if p > T::zero() && p > *e + float_slack(*e) => Some(n),
            _ => None,
        })
        .collect();
    LambdaBudget {
        proxy,
        empirical,
        exhausted_at,
        violations,
    }
}

/// Writes the certificate as CSV: one row per recurrence check and one per
/// global-bound check.
pub fn write_certificate_csv<T: Real, W: Write>(cert: &TrackingCertificate<T>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "step", "lhs", "rhs", "inner_residual", "error_start", "pass"])?;
    for s in &cert.steps {
        w.write_record([
            "recurrence".to_string(),
            s.step.to_string(),
            fmt_real(s.error_end),
            fmt_real(s.bound),
            fmt_real(s.inner_residual),
            fmt_real(s.error_start),
            u8::from(s.pass).to_string(),
        ])?;
    }
    for g in &cert.global {
        w.write_record([
            "global".to_string(),
            g.step.to_string(),
            fmt_real(g.dist_to_min),
            fmt_real(g.bound),
            String::new(),
            String::new(),
            u8::from(g.pass).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn opt_real<T: Real>(x: Option<T>) -> String {
    x.map_or_else(|| "n/a".to_string(), fmt_real)
}

/// Human-readable certificate summary with an optional constants table.
pub fn certificate_summary<T: Real>(cert: &TrackingCertificate<T>, constants: Option<&TheoryConstants<T>>) -> String {
    let mut s = String::new();
    let failed_steps: Vec<usize> = cert.steps.iter().filter(|c| !c.pass).map(|c| c.step).collect();
    let failed_global: Vec<usize> = cert.global.iter().filter(|c| !c.pass).map(|c| c.step).collect();
    let _ = writeln!(s, "tracking certificate: {}", if cert.passed { "PASS" } else { "FAIL" });
    let _ = writeln!(s, "assumed, not verified: geodesic convexity of the increment functional, injectivity radius, output isolation radii");
    let _ = writeln!(s, "rho = {}", fmt_real(cert.rho));
    let _ = writeln!(s, "epsilon = {}", fmt_real(cert.epsilon));
    let _ = writeln!(s, "sup tracking error = {}", fmt_real(cert.sup_error));
    let _ = writeln!(
        s,
        "recurrence checks: {} of {} pass{}",
        cert.steps.len() - failed_steps.len(),
        cert.steps.len(),
        if failed_steps.is_empty() {
            String::new()
        } else {
            format!(" (failing steps {failed_steps:?})")
        }
    );
    let _ = writeln!(
        s,
        "global-bound checks: {} of {} pass{}",
        cert.global.len() - failed_global.len(),
        cert.global.len(),
        if failed_global.is_empty() {
            String::new()
        } else {
            format!(" (failing steps {failed_global:?})")
        }
    );
    if let Some(c) = constants {
        let _ = writeln!(s, "constants (empirical where marked):");
        let rows: [(&str, String); 19] = [
            ("tau", fmt_real(c.tau)),
            ("m_F", fmt_real(c.m_f)),
            ("L_F", fmt_real(c.l_f)),
            ("nu", fmt_real(c.nu)),
            ("mu", fmt_real(c.mu)),
            ("kappa", fmt_real(c.kappa)),
            ("rho", fmt_real(c.rho)),
            ("s_min", fmt_real(c.s_min)),
            ("gram_s_min", fmt_real(c.gram_s_min)),
            ("lambda_hat (empirical)", fmt_real(c.lambda_hat)),
            ("L_hat (empirical)", opt_real(c.l_hat)),
            ("jac_op_norm", fmt_real(c.jac_op_norm)),
            ("r_w (empirical)", opt_real(c.r_w)),
            ("Lambda (empirical)", opt_real(c.big_lambda)),
            ("K_v", fmt_real(c.k_v)),
            ("h_star_norm", fmt_real(c.h_star_norm)),
            ("C_v (empirical)", opt_real(c.c_v)),
            ("degenerate", c.degenerate.to_string()),
            ("delta", opt_real(c.delta)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "  {k:<24} {v}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::QuadraticRegressionEnergy;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn inputs(tau: f64, m: f64, l: f64, energy: f64) -> TheoryInputs<f64> {
        TheoryInputs {
            tau,
            m_f: m,
            l_f: l,
            energy,
            h_star_norm: 0.0,
            s_min: 2.0,
            gram_s_min: 1.0,
            jac_op_norm: 3.0,
            lip_u: 3.0,
            l_hat: Some(0.5),
            epsilon: 0.0,
            delta: None,
        }
    }

    #[test]
    fn constants_examples() {
        let c = TheoryConstants::from_inputs(&inputs(0.1, 1.0, 1.0, 0.0)).unwrap();
        assert!((c.nu - 11.0).abs() < 1e-14 && (c.mu - 11.0).abs() < 1e-14);
        assert_eq!(c.kappa, 1.0);
        assert!((c.rho - 1.0 / 1.1).abs() < 1e-15);
        assert_eq!((c.k_v, c.c_v), (0.0, Some(0.0)));

        let c = TheoryConstants::from_inputs(&inputs(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(c.k_v, 1.0);

        let mut bad = inputs(1.0, 0.0, 1.0, 1.0);
        assert!(matches!(
            TheoryConstants::from_inputs(&bad),
            Err(Error::Precondition(_))
        ));
        bad.m_f = 1.0;
        bad.tau = 0.0;
        assert!(TheoryConstants::from_inputs(&bad).is_err());
    }

    #[test]
    fn degenerate_jacobian() {
        let mut x = inputs(1.0, 1.0, 2.0, 0.5);
        x.gram_s_min = 0.0;
        let c = TheoryConstants::from_inputs(&x).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.c_v, Some(f64::INFINITY));
        assert_eq!(c.r_w, Some(0.0));
    }

    #[test]
    fn r_w_entries() {
        let mut x = inputs(0.5, 1.0, 3.0, 0.2);
        x.gram_s_min = 0.4;
        x.l_hat = Some(2.0);
        x.jac_op_norm = 5.0;
        x.lip_u = 6.0;
        let c = TheoryConstants::from_inputs(&x).unwrap();
        let lam: f64 = 0.2;
        let a = lam / 2.0;
        let b = lam * lam / (4.0 * ((25.0 + lam * lam).sqrt() + 5.0));
        let third = lam * lam * 1.5 / (8.0 * 6.0 * 2.5);
        assert!((c.r_w.unwrap() - a.min(b).min(third)).abs() < 1e-16);
        assert!((c.big_lambda.unwrap() - 4.0 / (lam * lam)).abs() < 1e-12);
        // Third entry equals nu lambda^2 / (4 mu L Lip).
        assert!((third - c.nu * lam * lam / (4.0 * c.mu * 2.0 * 6.0)).abs() < 1e-16);
    }

    #[test]
    fn horizon_examples() {
        let mut x = inputs(1.0, 1.0, 1.0, 0.0);
        x.delta = Some(1.0);
        let c = TheoryConstants::from_inputs(&x).unwrap();
        let t = inner_horizon_T(1.0, &c).unwrap();
        assert!((t.value - 2f64.ln()).abs() < 1e-15);
        let t2 = inner_horizon_T(2.0, &c).unwrap();
        assert!((t2.value - t.value - 2.0 / c.nu * 2f64.ln()).abs() < 1e-15);

        // delta = Cbar (1 + tau m) / (tau m) puts the argument at one.
        let (tau, m, cbar) = (0.3, 2.0, 0.7);
        let mut y = inputs(tau, m, 3.0, 0.0);
        y.delta = Some(cbar * (1.0 + tau * m) / (tau * m));
        let c = TheoryConstants::from_inputs(&y).unwrap();
        assert!(inner_horizon_T(cbar, &c).unwrap().value.abs() < 1e-15);
        let small = inner_horizon_T(cbar / 2.0, &c).unwrap();
        assert_eq!((small.value, small.clamped), (0.0, true));

        y.epsilon = 10.0;
        let c = TheoryConstants::from_inputs(&y).unwrap();
        assert!(matches!(inner_horizon_T(1.0, &c), Err(Error::Precondition(_))));
        let c = TheoryConstants::from_inputs(&inputs(1.0, 1.0, 1.0, 0.0)).unwrap();
        assert!(inner_horizon_T(1.0, &c).is_err());
    }

    #[test]
    fn step_count_examples() {
        // nu = 2, mu = 2, eta = 1/4 gives q = sqrt(3)/2; argument 2.
        let mut x = inputs(1.0, 1.0, 1.0, 0.0);
        x.delta = Some(1.0);
        let c = TheoryConstants::from_inputs(&x).unwrap();
        assert_eq!(c.nu, 2.0);
        let k = inner_iters_K(1.0, 0.25, &c).unwrap();
        let expected = (2f64.ln() / (2.0 / 3f64.sqrt()).ln()).ceil() as usize;
        assert_eq!(k, expected);
        assert_eq!(k, 5);
        // eta = 1/2 exceeds 2/(3 mu) = 1/3.
        assert!(matches!(inner_iters_K(1.0, 0.5, &c), Err(Error::Parameter(_))));
        assert!(inner_iters_K(1.0, 0.0, &c).is_err());
        assert!(inner_iters_K(1.0, 1.0 / 3.0, &c).is_ok());
        assert_eq!(inner_iters_K(0.5, 0.25, &c).unwrap(), 0);
        assert_eq!(inner_iters_K(0.1, 0.25, &c).unwrap(), 0);
    }

    #[test]
    fn step_count_small_eta_limit() {
        // K eta -> (4/nu) log(arg): twice the continuous horizon.
        let mut x = inputs(0.5, 1.0, 1.0, 0.0);
        x.delta = Some(0.1);
        let c = TheoryConstants::from_inputs(&x).unwrap();
        let dbar = 3.0;
        let horizon = inner_horizon_T(dbar, &c).unwrap().value;
        let eta = 1e-6;
        let k = inner_iters_K(dbar, eta, &c).unwrap() as f64;
        assert!((k * eta / (2.0 * horizon) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn locality_examples() {
        assert_eq!(locality_threshold(1.0, 0.0, 1.0), f64::INFINITY);
        assert_eq!(locality_threshold(1.0, 1.0, 1.0), 1.0);
        assert!((locality_threshold(1.0f64, 1.0, 0.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(locality_threshold(3.0, 1.0, 1.0), f64::INFINITY);
    }

    fn row(step: usize, delta: f64, s: f64) -> TrackingRow<f64> {
        TrackingRow {
            step,
            tracking_error_start: 0.0,
            tracking_error: 0.0,
            inner_residual: 0.0,
            dist_to_min: None,
            initial_dist_to_min: None,
            gram_s_min: s,
            param_step_norm: delta,
        }
    }

    #[test]
    fn budget_examples() {
        let b = lambda_budget(&[row(0, 0.0, 3.0), row(1, 0.0, 3.0)], 1.0, 5.0);
        assert_eq!(b.proxy, vec![1.0, 1.0, 1.0]);
        assert_eq!(b.exhausted_at, None);
        assert!(b.violations.is_empty());

        let b = lambda_budget(&[row(0, 0.5, 2.0), row(1, 0.5, 0.5)], 1.0, 2.0);
        assert_eq!(b.proxy, vec![1.0, 0.5, 0.0]);
        assert_eq!(b.exhausted_at, Some(2));
        assert_eq!(b.empirical, vec![Some(1.0), Some(0.25), None]);
        assert_eq!(b.violations, vec![1]);
    }

    #[test]
    fn geometric_bound_shape() {
        assert_eq!(geometric_tracking_bound(2.0, 0.0, 0.5, 0.0, 3), 0.25);
        assert_eq!(geometric_tracking_bound(0.0, 1.0, 0.5, 0.0, 1), 1.0);
        assert_eq!(geometric_tracking_bound(0.0, 0.0, 0.5, 1.0, 2), 1.5);
        assert_eq!(geometric_tracking_bound(1.0, 1.0, 0.5, 1.0, 0), 1.0);
    }

    fn line(n: usize) -> Arc<SampleGrid<f64>> {
        Arc::new(SampleGrid::linspace(-1.0, 1.0, n).unwrap())
    }

    #[test]
    fn exact_iterates_certify_with_zero_error() {
        let g = line(16);
        let f = GridFunction::from_fn(Arc::clone(&g), |x| x[0].sin());
        let u0 = GridFunction::from_fn(Arc::clone(&g), |x| x[0] * x[0]);
        let energy = QuadraticRegressionEnergy::new(f.clone());
        let tau = 0.1;
        let traj =
            crate::reference::ExactTrajectory::compute(&u0, &f, tau, 20, crate::reference::Evaluation::Recursive)
                .unwrap();
        let cert = certify_tracking(&traj.steps, &traj.steps, &energy, tau, 0.0).unwrap();
        assert!(cert.passed);
        assert_eq!(cert.sup_error, 0.0);
        assert!(cert
            .steps
            .iter()
            .all(|s| s.error_end == 0.0 && s.inner_residual <= 1e-15));
        assert_eq!(cert.global.len(), 20);
        assert!(certify_tracking(&traj.steps[..3], &traj.steps, &energy, tau, 0.0).is_err());
    }

    #[test]
    fn perturbed_iterates_still_satisfy_recurrence() {
        // The recurrence is a triangle inequality: it holds for any iterates.
        let g = line(10);
        let f = GridFunction::from_fn(Arc::clone(&g), |x| x[0]);
        let energy = QuadraticRegressionEnergy::new(f.clone());
        let tau = 0.2;
        let u0 = GridFunction::constant(Arc::clone(&g), 1.0);
        let exact =
            crate::reference::ExactTrajectory::compute(&u0, &f, tau, 8, crate::reference::Evaluation::Closed).unwrap();
        let noisy: Vec<_> = exact
            .steps
            .iter()
            .enumerate()
            .map(|(n, u)| {
                GridFunction::from_fn(Arc::clone(&g), |x| x[0] * 0.01 * n as f64)
                    .add(u)
                    .unwrap()
            })
            .collect();
        let cert = certify_tracking(&noisy, &exact.steps, &energy, tau, 0.0).unwrap();
        assert!(cert.passed);
        assert!(cert.sup_error > 0.0);
    }

    #[test]
    fn records_certificate_flags_violations() {
        let good = TrackingRow {
            step: 0,
            tracking_error_start: 1.0,
            tracking_error: 0.9,
            inner_residual: 0.0,
            dist_to_min: Some(1.0),
            initial_dist_to_min: Some(1.0),
            gram_s_min: 1.0,
            param_step_norm: 0.1,
        };
        assert!(certify_records(&[good], 0.9, 0.0).unwrap().passed);
        let bad = TrackingRow {
            tracking_error: 0.95,
            ..good
        };
        let cert = certify_records(&[bad], 0.9, 0.0).unwrap();
        assert!(!cert.passed);
        let summary = certificate_summary(&cert, None);
        assert!(summary.starts_with("tracking certificate: FAIL"));
        let mut buf = Vec::new();
        write_certificate_csv(&cert, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("recurrence,0,"));
        let missing = TrackingRow {
            inner_residual: f64::NAN,
            ..good
        };
        assert!(certify_records(&[missing], 0.9, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn constant_pack_coherence(tau in 1e-4f64..10.0, m in 1e-3f64..10.0, extra in 0.0f64..10.0, f in 0.0f64..100.0) {
            let c = TheoryConstants::from_inputs(&inputs(tau, m, m + extra, f)).unwrap();
            prop_assert!((c.kappa * c.nu - c.mu).abs() <= 1e-12 * c.mu);
            prop_assert!((c.rho * (1.0 + tau * m) - 1.0).abs() <= 1e-12);
            prop_assert!(c.nu <= c.mu && c.kappa >= 1.0);
            prop_assert!(c.rho > 0.0 && c.rho < 1.0);
            prop_assert!((c.k_v - (2.0 * tau * f / (1.0 + tau * m)).sqrt()).abs() <= 1e-12 * c.k_v.max(1.0));
        }
    }
}
