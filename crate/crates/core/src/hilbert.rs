//! Discrete Hilbert space: sampled functions on a weighted point cloud.
//!
//! All reductions (inner products, norms) run sequentially in grid index
//! order, so results are bit-reproducible for a fixed grid.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{cg_solve, CgConfig};
use crate::scalar::Real;

/// Sample points with quadrature weights (an empirical measure by default).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid<T> {
    dim: usize,
    points: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> SampleGrid<T> {
    /// Grid with uniform weights `1/N`.
    pub fn uniform(points: Vec<Vec<T>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Input("sample grid needs at least one point".into()));
        }
        let w = T::one() / T::from_count(n);
        Self::with_weights(points, vec![w; n])
    }

    pub fn with_weights(points: Vec<Vec<T>>, weights: Vec<T>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Input("sample grid needs at least one point".into()));
        }
        if weights.len() != n {
            return Err(Error::Dimension(format!("{} weights for {} points", weights.len(), n)));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::Input("points must have dimension >= 1".into()));
        }
        if let Some(i) = points.iter().position(|p| p.len() != dim) {
            return Err(Error::Dimension(format!(
                "point {i} has dimension {} (expected {dim})",
                points[i].len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
            return Err(Error::Input("weights must be finite and nonnegative".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > Self::weight_tolerance(n) {
            return Err(Error::Input(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self {
            dim,
            points: points.into_iter().flatten().collect(),
            weights,
        })
    }

    fn weight_tolerance(n: usize) -> T {
        T::lit(1e-12).max(T::epsilon() * T::from_count(4 * n))
    }

    /// `n` uniformly spaced points on `[a, b]` (endpoints included).
    pub fn linspace(a: T, b: T, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter("linspace needs n >= 2".into()));
        }
        let h = (b - a) / T::from_count(n - 1);
        let points = (0..n)
            .map(|i| {
                let x = if i == n - 1 { b } else { a + h * T::from_count(i) };
                vec![x]
            })
            .collect();
        Self::uniform(points)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[T]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Average weight; equals `1/N` for uniform grids.
    pub fn mean_weight(&self) -> T {
        T::one() / T::from_count(self.len())
    }

    /// Grid whose points are each repeated `c` times with weight `w_i / c`,
    /// the carrier for stacked vector-valued outputs.
    pub fn stacked(&self, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::Parameter("stack count must be >= 1".into()));
        }
        if c == 1 {
            return Ok(self.clone());
        }
        let cc = T::from_count(c);
        let mut points = Vec::with_capacity(self.len() * c);
        let mut weights = Vec::with_capacity(self.len() * c);
        for (p, &w) in self.points().zip(&self.weights) {
            for _ in 0..c {
                points.push(p.to_vec());
                weights.push(w / cc);
            }
        }
        Self::with_weights(points, weights)
    }

    fn compatible(a: &Arc<Self>, b: &Arc<Self>) -> bool {
        Arc::ptr_eq(a, b) || **a == **b
    }
}

/// A function sampled on a [`SampleGrid`].
#[derive(Debug, Clone)]
pub struct GridFunction<T> {
    values: Vec<T>,
    grid: Arc<SampleGrid<T>>,
}

impl<T: Real> PartialEq for GridFunction<T> {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values && SampleGrid::compatible(&self.grid, &other.grid)
    }
}

impl<T: Real> GridFunction<T> {
    pub fn new(grid: Arc<SampleGrid<T>>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "{} values on a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { values, grid })
    }

    pub fn zeros(grid: Arc<SampleGrid<T>>) -> Self {
        Self::constant(grid, T::zero())
    }

    pub fn constant(grid: Arc<SampleGrid<T>>, c: T) -> Self {
        let values = vec![c; grid.len()];
        Self { values, grid }
    }

    pub fn from_fn(grid: Arc<SampleGrid<T>>, f: impl Fn(&[T]) -> T) -> Self {
        let values = grid.points().map(f).collect();
        Self { values, grid }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grid(&self) -> &Arc<SampleGrid<T>> {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_same_grid(&self, other: &Self) -> Result<()> {
        if SampleGrid::compatible(&self.grid, &other.grid) {
            Ok(())
        } else {
            Err(Error::Dimension("grid functions live on different grids".into()))
        }
    }

    /// `a * self + b * other`
    pub fn lin_comb(&self, a: T, other: &Self, b: T) -> Result<Self> {
        self.check_same_grid(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Self {
            values,
            grid: Arc::clone(&self.grid),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.lin_comb(T::one(), other, T::one())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.lin_comb(T::one(), other, -T::one())
    }

    pub fn scale(&self, a: T) -> Self {
        Self {
            values: self.values.iter().map(|&x| a * x).collect(),
            grid: Arc::clone(&self.grid),
        }
    }

    /// Writes `x_1..x_d,value,weight` rows with a header line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.grid.dim();
        let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
        header.push("value".into());
        header.push("weight".into());
        w.write_record(&header)?;
        for (i, (&v, &wt)) in self.values.iter().zip(self.grid.weights()).enumerate() {
            let mut row: Vec<String> = self.grid.point(i).iter().map(|&x| fmt_real(x)).collect();
            row.push(fmt_real(v));
            row.push(fmt_real(wt));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the format produced by [`GridFunction::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let ncols = rdr.headers()?.len();
        if ncols < 3 {
            return Err(Error::Input(
                "grid function csv needs x_1..x_d, value, weight columns".into(),
            ));
        }
        let d = ncols - 2;
        let mut points = Vec::new();
        let mut values = Vec::new();
        let mut weights = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |col: usize| -> Result<T> {
                let cell = rec.get(col).unwrap_or("");
                cell.trim()
                    .parse::<f64>()
                    .map(T::lit)
                    .map_err(|_| Error::Input(format!("row {}, column {}: '{cell}' is not numeric", row + 1, col + 1)))
            };
            points.push((0..d).map(parse).collect::<Result<Vec<_>>>()?);
            values.push(parse(d)?);
            weights.push(parse(d + 1)?);
        }
        let grid = Arc::new(SampleGrid::with_weights(points, weights)?);
        Self::new(grid, values)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Formats a scalar with 17 significant digits.
pub fn fmt_real<T: Real>(x: T) -> String {
    format!("{:.16e}", x.as_f64())
}

/// Weighted inner product `sum_i w_i u_i v_i`.
pub fn inner<T: Real>(u: &GridFunction<T>, v: &GridFunction<T>) -> Result<T> {
    u.check_same_grid(v)?;
    Ok(weighted_dot(u.grid.weights(), &u.values, &v.values))
}

pub fn norm<T: Real>(u: &GridFunction<T>) -> T {
    weighted_dot(u.grid.weights(), &u.values, &u.values).sqrt()
}

/// `||u - v||`
pub fn distance<T: Real>(u: &GridFunction<T>, v: &GridFunction<T>) -> Result<T> {
    Ok(norm(&u.sub(v)?))
}

pub(crate) fn weighted_dot<T: Real>(w: &[T], a: &[T], b: &[T]) -> T {
    w.iter()
        .zip(a.iter().zip(b))
        .fold(T::zero(), |acc, (&wi, (&x, &y))| acc + wi * x * y)
}

/// Energy functional on the discrete Hilbert space.
///
/// Implementations must be nonnegative, `m_F`-strongly convex and have an
/// `L_F`-Lipschitz gradient with respect to the weighted inner product.
pub trait EnergyFunctional<T: Real> {
    fn value(&self, u: &GridFunction<T>) -> Result<T>;

    /// Hilbert-space gradient (Riesz representative under the weighted inner product).
    fn gradient(&self, u: &GridFunction<T>) -> Result<GridFunction<T>>;

    /// `m_F`
    fn strong_convexity(&self) -> T;

    /// `L_F`
    fn gradient_lipschitz(&self) -> T;

    /// Closed-form proximal map, when one is known.
    fn closed_form_prox(&self, _v: &GridFunction<T>, _tau: T) -> Option<Result<GridFunction<T>>> {
        None
    }

    /// The global minimizer `u*`, when it is known in closed form.
    fn minimizer(&self) -> Option<&GridFunction<T>> {
        None
    }
}

/// `F[u] = 1/2 ||u - f*||^2`
#[derive(Debug, Clone)]
pub struct QuadraticRegressionEnergy<T> {
    target: GridFunction<T>,
}

impl<T: Real> QuadraticRegressionEnergy<T> {
    pub fn new(target: GridFunction<T>) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &GridFunction<T> {
        &self.target
    }
}

impl<T: Real> EnergyFunctional<T> for QuadraticRegressionEnergy<T> {
    fn value(&self, u: &GridFunction<T>) -> Result<T> {
        let d = norm(&u.sub(&self.target)?);
        Ok(T::lit(0.5) * d * d)
    }

    fn gradient(&self, u: &GridFunction<T>) -> Result<GridFunction<T>> {
        u.sub(&self.target)
    }

    fn strong_convexity(&self) -> T {
        T::one()
    }

    fn gradient_lipschitz(&self) -> T {
        T::one()
    }

    fn closed_form_prox(&self, v: &GridFunction<T>, tau: T) -> Option<Result<GridFunction<T>>> {
        let s = T::one() / (T::one() + tau);
        Some(v.lin_comb(s, &self.target, tau * s))
    }

    fn minimizer(&self) -> Option<&GridFunction<T>> {
        Some(&self.target)
    }
}

/// `F[u] = sum_i w_i (1/2 s_i^2 + alpha log cosh s_i)` with `s = u - f*`.
///
/// A non-quadratic energy with `m_F = 1`, `L_F = 1 + alpha`; it has no
/// closed-form proximal map.
#[derive(Debug, Clone)]
pub struct LogCoshRegressionEnergy<T> {
    target: GridFunction<T>,
    alpha: T,
}

impl<T: Real> LogCoshRegressionEnergy<T> {
    pub fn new(target: GridFunction<T>, alpha: T) -> Result<Self> {
        if !(alpha >= T::zero()) {
            return Err(Error::Parameter("alpha must be nonnegative".into()));
        }
        Ok(Self { target, alpha })
    }
}

fn log_cosh<T: Real>(s: T) -> T {
    let a = s.abs();
    a + (-(a + a)).exp().ln_1p() - T::LN_2()
}

impl<T: Real> EnergyFunctional<T> for LogCoshRegressionEnergy<T> {
    fn value(&self, u: &GridFunction<T>) -> Result<T> {
        let s = u.sub(&self.target)?;
        let half = T::lit(0.5);
        Ok(s.values.iter().zip(s.grid.weights()).fold(T::zero(), |acc, (&si, &w)| {
            acc + w * (half * si * si + self.alpha * log_cosh(si))
        }))
    }

    fn gradient(&self, u: &GridFunction<T>) -> Result<GridFunction<T>> {
        let mut s = u.sub(&self.target)?;
        for si in &mut s.values {
            *si += self.alpha * si.tanh();
        }
        Ok(s)
    }

    fn strong_convexity(&self) -> T {
        T::one()
    }

    fn gradient_lipschitz(&self) -> T {
        T::one() + self.alpha
    }

    fn minimizer(&self) -> Option<&GridFunction<T>> {
        Some(&self.target)
    }
}

/// `g(h; v) = ||h||^2 / (2 tau) + F[v + h]`
pub fn increment_objective<T: Real, E: EnergyFunctional<T> + ?Sized>(
    h: &GridFunction<T>,
    v: &GridFunction<T>,
    tau: T,
    energy: &E,
) -> Result<T> {
    check_tau(tau)?;
    let hn = norm(h);
    Ok(hn * hn / (tau + tau) + energy.value(&v.add(h)?)?)
}

pub(crate) fn check_tau<T: Real>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("tau must be positive, got {tau}")))
    }
}

/// Settings for the Newton root-find behind [`exact_prox`].
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions<T> {
    pub tolerance: T,
    pub max_iters: usize,
}

impl<T: Real> Default for NewtonOptions<T> {
    fn default() -> Self {
        Self {
            tolerance: T::lit(1e-12).max(T::epsilon() * T::lit(16.0)),
            max_iters: 100,
        }
    }
}

/// Proximal map `J_tau(v) = argmin_u ||u - v||^2/(2 tau) + F[u]`.
///
/// Uses the energy's closed form when available, otherwise [`newton_prox`].
pub fn exact_prox<T: Real, E: EnergyFunctional<T> + ?Sized>(
    v: &GridFunction<T>,
    tau: T,
    energy: &E,
) -> Result<GridFunction<T>> {
    check_tau(tau)?;
    if energy.strong_convexity() <= T::zero() {
        return Err(Error::Precondition(
            "exact prox requires a strongly convex energy (m_F > 0)".into(),
        ));
    }
    match energy.closed_form_prox(v, tau) {
        Some(r) => r,
        None => newton_prox(v, tau, energy, NewtonOptions::default()),
    }
}

/// Damped Newton-Krylov solve of `h/tau + grad F[v + h] = 0`, returning `v + h`.
///
/// Hessian-vector products are central differences of the gradient; the
/// Newton system is solved by CG in the weighted inner product and the
/// step is damped by backtracking on the residual norm.
pub fn newton_prox<T: Real, E: EnergyFunctional<T> + ?Sized>(
    v: &GridFunction<T>,
    tau: T,
    energy: &E,
    opts: NewtonOptions<T>,
) -> Result<GridFunction<T>> {
    check_tau(tau)?;
    let grid = Arc::clone(v.grid());
    let weights = grid.weights().to_vec();
    let inv_tau = T::one() / tau;
    let residual = |h: &GridFunction<T>| -> Result<GridFunction<T>> {
        let g = energy.gradient(&v.add(h)?)?;
        h.lin_comb(inv_tau, &g, T::one())
    };

    let mut h = GridFunction::zeros(Arc::clone(&grid));
    let mut r = residual(&h)?;
    let mut rnorm = norm(&r);
    let fd_step = T::epsilon().cbrt();
    let cg = CgConfig {
        max_iters: 4 * grid.len().max(8),
        rel_tolerance: T::lit(1e-10).max(T::epsilon() * T::lit(64.0)),
    };

    for _ in 0..opts.max_iters {
        if rnorm <= opts.tolerance {
            return v.add(&h);
        }
        let point = v.add(&h)?;
        // Weighted-symmetric operator z -> W (z/tau + Hz), right side -W r.
        let op = |z: &[T], out: &mut [T]| {
            let zn = z.iter().fold(T::zero(), |m, x| m.max(x.abs()));
            let eps = if zn > T::zero() { fd_step / zn } else { fd_step };
            let shift = |sign: T| -> GridFunction<T> {
                let vals: Vec<T> = point
                    .values()
                    .iter()
                    .zip(z)
                    .map(|(&p, &zi)| p + sign * eps * zi)
                    .collect();
                let shifted = GridFunction::new(Arc::clone(&grid), vals).expect("same grid length");
                energy.gradient(&shifted).expect("gradient on shared grid")
            };
            let gp = shift(T::one());
            let gm = shift(-T::one());
            for i in 0..z.len() {
                let hz = (gp.values[i] - gm.values[i]) / (eps + eps);
                out[i] = weights[i] * (z[i] * inv_tau + hz);
            }
        };
        let rhs: Vec<T> = r.values.iter().zip(&weights).map(|(&ri, &w)| -w * ri).collect();
        let sol = cg_solve(op, &rhs, &cg)?;
        let dir = GridFunction::new(Arc::clone(&grid), sol.solution)?;

        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let trial = h.lin_comb(T::one(), &dir, t)?;
            let tr = residual(&trial)?;
            let tn = norm(&tr);
            if tn < rnorm || tn <= opts.tolerance {
                h = trial;
                r = tr;
                rnorm = tn;
                accepted = true;
                break;
            }
            t *= T::lit(0.5);
        }
        if !accepted {
            break;
        }
    }
    if rnorm <= opts.tolerance {
        return v.add(&h);
    }
    Err(Error::Numerical {
        message: format!("prox Newton iteration did not reach tolerance {}", opts.tolerance),
        residual: rnorm.as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid2() -> Arc<SampleGrid<f64>> {
        Arc::new(SampleGrid::uniform(vec![vec![0.0], vec![1.0]]).unwrap())
    }

    fn gf(grid: &Arc<SampleGrid<f64>>, v: &[f64]) -> GridFunction<f64> {
        GridFunction::new(Arc::clone(grid), v.to_vec()).unwrap()
    }

    fn line_grid(n: usize) -> Arc<SampleGrid<f64>> {
        Arc::new(SampleGrid::linspace(-1.0, 1.0, n).unwrap())
    }

    #[test]
    fn inner_examples() {
        let g = grid2();
        let one = GridFunction::constant(line_grid(7), 1.0);
        assert!((inner(&one, &one).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(inner(&gf(&g, &[1.0, 0.0]), &gf(&g, &[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(inner(&gf(&g, &[2.0, 2.0]), &gf(&g, &[3.0, 3.0])).unwrap(), 6.0);
    }

    #[test]
    fn inner_rejects_grid_mismatch() {
        let a = GridFunction::constant(line_grid(3), 1.0);
        let b = GridFunction::constant(line_grid(4), 1.0);
        assert!(matches!(inner(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn norm_examples() {
        let g = grid2();
        assert_eq!(norm(&GridFunction::zeros(Arc::clone(&g))), 0.0);
        assert!((norm(&GridFunction::constant(line_grid(9), -3.0)) - 3.0).abs() < 1e-14);
        assert!((norm(&gf(&g, &[3.0, 4.0])) - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grid_validation() {
        assert!(SampleGrid::<f64>::uniform(vec![]).is_err());
        assert!(SampleGrid::uniform(vec![vec![0.0], vec![1.0, 2.0]]).is_err());
        assert!(SampleGrid::with_weights(vec![vec![0.0], vec![1.0]], vec![0.5, 0.6]).is_err());
        assert!(SampleGrid::with_weights(vec![vec![0.0], vec![1.0]], vec![0.25, 0.75]).is_ok());
        let g = SampleGrid::<f64>::linspace(-1.0, 1.0, 256).unwrap();
        assert_eq!(g.point(0), &[-1.0]);
        assert_eq!(g.point(255), &[1.0]);
    }

    #[test]
    fn increment_objective_examples() {
        let g = line_grid(5);
        let target = GridFunction::from_fn(Arc::clone(&g), |x| x[0] * x[0]);
        let energy = QuadraticRegressionEnergy::new(target.clone());
        let v = GridFunction::from_fn(Arc::clone(&g), |x| x[0].sin());
        let zero = GridFunction::zeros(Arc::clone(&g));
        let fv = energy.value(&v).unwrap();
        assert_eq!(increment_objective(&zero, &v, 0.3, &energy).unwrap(), fv);
        assert_eq!(increment_objective(&zero, &target, 0.3, &energy).unwrap(), 0.0);

        let e0 = QuadraticRegressionEnergy::new(GridFunction::zeros(Arc::clone(&g)));
        let h = GridFunction::constant(Arc::clone(&g), 1.0);
        let val = increment_objective(&h, &zero, 1.0, &e0).unwrap();
        assert!((val - 1.0).abs() < 1e-15);
        assert!(matches!(
            increment_objective(&h, &zero, 0.0, &e0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn prox_examples() {
        let g = line_grid(16);
        let target = GridFunction::from_fn(Arc::clone(&g), |x| x[0].cos());
        let energy = QuadraticRegressionEnergy::new(target.clone());
        let fixed = exact_prox(&target, 0.7, &energy).unwrap();
        assert!(distance(&fixed, &target).unwrap() < 1e-15);

        let e0 = QuadraticRegressionEnergy::new(GridFunction::zeros(Arc::clone(&g)));
        let p = exact_prox(&GridFunction::constant(Arc::clone(&g), 1.0), 1.0, &e0).unwrap();
        assert!(p.values().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn newton_prox_matches_closed_form() {
        let g = line_grid(32);
        let target = GridFunction::from_fn(Arc::clone(&g), |x| x[0] * x[0] + 0.3 * (6.0 * x[0]).sin());
        let energy = QuadraticRegressionEnergy::new(target.clone());
        let v = GridFunction::from_fn(Arc::clone(&g), |x| 2.0 - x[0]);
        let tau = 0.1;
        let closed = exact_prox(&v, tau, &energy).unwrap();
        let expected = v.lin_comb(1.0 / 1.1, &target, 0.1 / 1.1).unwrap();
        assert!(distance(&closed, &expected).unwrap() < 1e-15);
        let newton = newton_prox(&v, tau, &energy, NewtonOptions::default()).unwrap();
        assert!(distance(&newton, &closed).unwrap() < 1e-12);
    }

    #[test]
    fn newton_prox_solves_first_order_condition_for_logcosh() {
        let g = line_grid(40);
        let target = GridFunction::from_fn(Arc::clone(&g), |x| (3.0 * x[0]).sin());
        let energy = LogCoshRegressionEnergy::new(target, 2.5).unwrap();
        let v = GridFunction::from_fn(Arc::clone(&g), |x| 4.0 * x[0]);
        let tau = 0.5;
        let u = exact_prox(&v, tau, &energy).unwrap();
        let h = u.sub(&v).unwrap();
        let foc = h.lin_comb(1.0 / tau, &energy.gradient(&u).unwrap(), 1.0).unwrap();
        assert!(norm(&foc) <= 1e-12);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let g = Arc::new(
            SampleGrid::with_weights(
                vec![vec![0.1, -2.0], vec![1.0 / 3.0, 5.5], vec![-7.25, 1e-9]],
                vec![0.2, 0.3, 0.5],
            )
            .unwrap(),
        );
        let u = GridFunction::new(Arc::clone(&g), vec![std::f64::consts::PI, -1e-300, 123456.789]).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let back = GridFunction::<f64>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, u);
    }

    fn arb_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn prox_contracts_by_one_over_one_plus_tau(a in arb_values(12), b in arb_values(12), tau in 0.001f64..10.0) {
            let g = line_grid(12);
            let target = GridFunction::from_fn(Arc::clone(&g), |x| x[0].exp());
            let energy = QuadraticRegressionEnergy::new(target);
            let x = gf(&g, &a);
            let y = gf(&g, &b);
            let dxy = distance(&x, &y).unwrap();
            prop_assume!(dxy > 1e-6);
            let ratio = distance(&exact_prox(&x, tau, &energy).unwrap(), &exact_prox(&y, tau, &energy).unwrap()).unwrap() / dxy;
            prop_assert!((ratio - 1.0 / (1.0 + tau)).abs() < 1e-10);
        }

        #[test]
        fn logcosh_prox_is_contractive(a in arb_values(10), b in arb_values(10), tau in 0.01f64..5.0) {
            let g = line_grid(10);
            let energy = LogCoshRegressionEnergy::new(GridFunction::zeros(Arc::clone(&g)), 1.5).unwrap();
            let x = gf(&g, &a);
            let y = gf(&g, &b);
            let lhs = distance(&exact_prox(&x, tau, &energy).unwrap(), &exact_prox(&y, tau, &energy).unwrap()).unwrap();
            prop_assert!(lhs <= distance(&x, &y).unwrap() / (1.0 + tau) + 1e-10);
        }

        #[test]
        fn prox_decreases_energy(a in arb_values(10), tau in 0.01f64..5.0) {
            let g = line_grid(10);
            let target = GridFunction::from_fn(Arc::clone(&g), |x| x[0] * x[0]);
            for energy in [
                Box::new(QuadraticRegressionEnergy::new(target.clone())) as Box<dyn EnergyFunctional<f64>>,
                Box::new(LogCoshRegressionEnergy::new(target.clone(), 0.7).unwrap()),
            ] {
                let v = gf(&g, &a);
                let p = exact_prox(&v, tau, energy.as_ref()).unwrap();
                let step = distance(&p, &v).unwrap();
                let lhs = energy.value(&p).unwrap() + step * step / (2.0 * tau);
                prop_assert!(lhs <= energy.value(&v).unwrap() + 1e-12);
            }
        }

        #[test]
        fn increment_objective_is_midpoint_convex(a in arb_values(8), b in arb_values(8), c in arb_values(8), tau in 0.01f64..5.0) {
            let g = line_grid(8);
            let energy = LogCoshRegressionEnergy::new(GridFunction::from_fn(Arc::clone(&g), |x| x[0]), 3.0).unwrap();
            let v = gf(&g, &c);
            let h1 = gf(&g, &a);
            let h2 = gf(&g, &b);
            let mid = h1.lin_comb(0.5, &h2, 0.5).unwrap();
            let gm = increment_objective(&mid, &v, tau, &energy).unwrap();
            let avg = 0.5 * (increment_objective(&h1, &v, tau, &energy).unwrap() + increment_objective(&h2, &v, tau, &energy).unwrap());
            prop_assert!(gm <= avg + 1e-12 * (1.0 + avg.abs()));
        }

        #[test]
        fn gradient_monotonicity(a in arb_values(9), b in arb_values(9)) {
            let g = line_grid(9);
            let energy = LogCoshRegressionEnergy::new(GridFunction::from_fn(Arc::clone(&g), |x| x[0].sin()), 0.9).unwrap();
            let u = gf(&g, &a);
            let v = gf(&g, &b);
            let dg = energy.gradient(&u).unwrap().sub(&energy.gradient(&v).unwrap()).unwrap();
            let d = u.sub(&v).unwrap();
            let m = energy.strong_convexity();
            prop_assert!(inner(&dg, &d).unwrap() >= m * norm(&d).powi(2) - 1e-12);
        }
    }
}
