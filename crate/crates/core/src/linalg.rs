//! Dense kernels: matrices, conjugate gradients, symmetric eigenvalues and a
//! clipped backtracking line search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{all_finite, axpy, dot, norm2, Real};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![T::one(); n])
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out = A x`
    pub fn matvec_into(&self, x: &[T], out: &mut [T]) {
        assert_eq!(x.len(), self.cols, "matvec: input length");
        assert_eq!(out.len(), self.rows, "matvec: output length");
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, x);
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out = A^T y`
    pub fn t_matvec_into(&self, y: &[T], out: &mut [T]) {
        assert_eq!(y.len(), self.rows, "t_matvec: input length");
        assert_eq!(out.len(), self.cols, "t_matvec: output length");
        out.iter_mut().for_each(|o| *o = T::zero());
        for (i, &yi) in y.iter().enumerate() {
            axpy(yi, self.row(i), out);
        }
    }

    pub fn t_matvec(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        self.t_matvec_into(y, &mut out);
        out
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `A^T diag(w) A`, or `A^T A` when `weights` is `None`. Exactly symmetric.
    pub fn gram(&self, weights: Option<&[T]>) -> Self {
        let p = self.cols;
        let mut g = Self::zeros(p, p);
        for i in 0..self.rows {
            let w = weights.map_or(T::one(), |w| w[i]);
            let row = self.row(i);
            for a in 0..p {
                let ra = w * row[a];
                if ra == T::zero() {
                    continue;
                }
                let grow = &mut g.data[a * p..(a + 1) * p];
                for b in a..p {
                    grow[b] += ra * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                g.data[a * p + b] = g.data[b * p + a];
            }
        }
        g
    }

    /// Matrix with row `i` multiplied by `s[i]`.
    pub fn scale_rows(&self, s: &[T]) -> Self {
        assert_eq!(s.len(), self.rows);
        let mut m = self.clone();
        for (i, &si) in s.iter().enumerate() {
            m.row_mut(i).iter_mut().for_each(|x| *x *= si);
        }
        m
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension("matrix shapes differ".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Spectral norm by power iteration on `A^T A` (deterministic start).
    pub fn op_norm(&self) -> T {
        self.op_norm_with(T::lit(1e-13).max(T::epsilon() * T::lit(4.0)), 500)
    }

    /// Power iteration stopped once successive estimates agree to `rel_tol`.
    pub fn op_norm_with(&self, rel_tol: T, max_iters: usize) -> T {
        if self.rows == 0 || self.cols == 0 {
            return T::zero();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut x: Vec<T> = (0..self.cols).map(|_| T::lit(rng.random::<f64>() - 0.5)).collect();
        let mut sigma = T::zero();
        let mut y = vec![T::zero(); self.rows];
        for _ in 0..max_iters {
            let nx = norm2(&x);
            if nx == T::zero() {
                return T::zero();
            }
            x.iter_mut().for_each(|v| *v /= nx);
            self.matvec_into(&x, &mut y);
            let next = norm2(&y);
            self.t_matvec_into(&y, &mut x);
            if (next - sigma).abs() <= rel_tol * next {
                return next;
            }
            sigma = next;
        }
        sigma
    }
}

/// Conjugate-gradient settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig<T> {
    pub max_iters: usize,
    pub rel_tolerance: T,
}

impl<T: Real> Default for CgConfig<T> {
    fn default() -> Self {
        Self {
            max_iters: 30,
            rel_tolerance: T::lit(1e-8),
        }
    }
}

impl<T: Real> CgConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Parameter("cg max_iters must be >= 1".into()));
        }
        if !(self.rel_tolerance > T::zero()) {
            return Err(Error::Parameter("cg tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Result of [`cg_solve`].
#[derive(Debug, Clone)]
pub struct CgSolution<T> {
    pub solution: Vec<T>,
    /// Recursively updated residual norm `||b - A x||`.
    pub residual_norm: T,
    pub iters: usize,
    pub converged: bool,
    /// Set when `p^T A p <= 0` stopped the iteration early.
    pub negative_curvature: bool,
}

/// Solves `A x = b` for a symmetric positive (semi)definite operator given as
/// `op(x, out)` writing `A x` into `out`. Starts from `x = 0`.
pub fn cg_solve<T: Real, F>(mut op: F, rhs: &[T], cfg: &CgConfig<T>) -> Result<CgSolution<T>>
where
    F: FnMut(&[T], &mut [T]),
{
    cfg.validate()?;
    if !all_finite(rhs) {
        return Err(Error::Numerical {
            message: "cg right-hand side is not finite".into(),
            residual: f64::NAN,
        });
    }
    let n = rhs.len();
    let mut x = vec![T::zero(); n];
    let mut r = rhs.to_vec();
    let bnorm = norm2(rhs);
    let target = cfg.rel_tolerance * bnorm;
    let mut rr = dot(&r, &r);
    if bnorm == T::zero() {
        return Ok(CgSolution {
            solution: x,
            residual_norm: T::zero(),
            iters: 0,
            converged: true,
            negative_curvature: false,
        });
    }
    let mut p = r.clone();
    let mut ap = vec![T::zero(); n];
    let mut iters = 0;
    let mut negative_curvature = false;
    while iters < cfg.max_iters {
        op(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || !all_finite(&ap) {
            return Err(Error::Numerical {
                message: format!("non-finite operator output at cg iteration {iters}"),
                residual: rr.sqrt().as_f64(),
            });
        }
        if pap <= T::zero() {
            negative_curvature = true;
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        iters += 1;
        let rr_next = dot(&r, &r);
        if rr_next.sqrt() <= target {
            rr = rr_next;
            break;
        }
        let beta = rr_next / rr;
        rr = rr_next;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    let residual_norm = rr.sqrt();
    if !residual_norm.is_finite() {
        return Err(Error::Numerical {
            message: "cg residual became non-finite".into(),
            residual: residual_norm.as_f64(),
        });
    }
    Ok(CgSolution {
        solution: x,
        residual_norm,
        iters,
        converged: residual_norm <= target,
        negative_curvature,
    })
}

/// Backtracking line-search settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig<T> {
    pub contraction: T,
    pub max_backtracks: usize,
    pub max_step_norm: T,
    pub initial_step: T,
}

impl<T: Real> Default for LineSearchConfig<T> {
    fn default() -> Self {
        Self {
            contraction: T::lit(0.5),
            max_backtracks: 8,
            max_step_norm: T::lit(5.0),
            initial_step: T::one(),
        }
    }
}

impl<T: Real> LineSearchConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.contraction > T::zero() && self.contraction < T::one()) {
            return Err(Error::Parameter("contraction must lie in (0,1)".into()));
        }
        if self.max_backtracks == 0 {
            return Err(Error::Parameter("max_backtracks must be >= 1".into()));
        }
        if !(self.max_step_norm > T::zero() && self.initial_step > T::zero()) {
            return Err(Error::Parameter(
                "max_step_norm and initial_step must be positive".into(),
            ));
        }
        Ok(())
    }

    /// First trial step: `min(initial_step, max_step_norm / direction_norm)`.
    pub fn first_trial(&self, direction_norm: T) -> T {
        if direction_norm > T::zero() {
            self.initial_step.min(self.max_step_norm / direction_norm)
        } else {
            self.initial_step
        }
    }
}

/// Outcome of [`backtracking_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome<T> {
    /// Accepted step, or zero on rejection.
    pub t: T,
    /// Number of trial evaluations (the value at `t = 0` is not counted).
    pub evals: usize,
    pub value: T,
    pub initial_value: T,
    pub rejected: bool,
}

/// Monotone backtracking: tries `t0, t0*c, t0*c^2, ...` (at most
/// `max_backtracks` trials) and accepts the first strict decrease.
pub fn backtracking_step<T: Real, F>(
    mut objective: F,
    direction_norm: T,
    cfg: &LineSearchConfig<T>,
) -> Result<LineSearchOutcome<T>>
where
    F: FnMut(T) -> T,
{
    let f0 = objective(T::zero());
    backtrack_from(f0, objective, direction_norm, cfg)
}

/// As [`backtracking_step`] with the value at `t = 0` already known.
pub fn backtrack_from<T: Real, F>(
    f0: T,
    mut objective: F,
    direction_norm: T,
    cfg: &LineSearchConfig<T>,
) -> Result<LineSearchOutcome<T>>
where
    F: FnMut(T) -> T,
{
    cfg.validate()?;
    if !f0.is_finite() {
        return Err(Error::Input(format!(
            "line search objective at t = 0 is not finite ({f0})"
        )));
    }
    let mut t = cfg.first_trial(direction_norm);
    for k in 0..cfg.max_backtracks {
        let ft = objective(t);
        if ft.is_finite() && ft < f0 {
            return Ok(LineSearchOutcome {
                t,
                evals: k + 1,
                value: ft,
                initial_value: f0,
                rejected: false,
            });
        }
        t *= cfg.contraction;
    }
    Ok(LineSearchOutcome {
        t: T::zero(),
        evals: cfg.max_backtracks,
        value: f0,
        initial_value: f0,
        rejected: true,
    })
}

fn check_symmetric<T: Real>(a: &DenseMatrix<T>) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::Input(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Input("empty matrix".into()));
    }
    let tol = T::lit(1e-10) * T::one().max(a.max_abs());
    let n = a.rows();
    for i in 0..n {
        for j in 0..i {
            if (a.get(i, j) - a.get(j, i)).abs() > tol {
                return Err(Error::Input(format!("matrix is not symmetric at ({i},{j})")));
            }
        }
    }
    if !all_finite(a.data()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix in ascending order.
///
/// Householder reduction to tridiagonal form followed by implicit QL.
pub fn symmetric_eigenvalues<T: Real>(a: &DenseMatrix<T>) -> Result<Vec<T>> {
    check_symmetric(a)?;
    let (mut d, mut e) = tridiagonalize(a);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(d)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn smallest_eig_sym<T: Real>(a: &DenseMatrix<T>) -> Result<T> {
    Ok(symmetric_eigenvalues(a)?[0])
}

/// Returns the diagonal and subdiagonal (`e[i]` couples `i` and `i+1`,
/// `e[n-1] = 0`) of a tridiagonal matrix similar to `a`.
fn tridiagonalize<T: Real>(a: &DenseMatrix<T>) -> (Vec<T>, Vec<T>) {
    let n = a.rows();
    let mut m = a.data().to_vec();
    let mut e = vec![T::zero(); n];
    let two = T::lit(2.0);
    let mut v = vec![T::zero(); n];
    let mut p = vec![T::zero(); n];
    for k in 0..n.saturating_sub(2) {
        let len = n - k - 1;
        let x0 = m[(k + 1) * n + k];
        let xnorm = (k + 1..n).map(|i| m[i * n + k] * m[i * n + k]).sum::<T>().sqrt();
        if xnorm == T::zero() {
            e[k] = T::zero();
            continue;
        }
        let alpha = if x0 >= T::zero() { -xnorm } else { xnorm };
        for i in 0..len {
            v[i] = m[(k + 1 + i) * n + k];
        }
        v[0] -= alpha;
        let vnorm = norm2(&v[..len]);
        e[k] = alpha;
        if vnorm == T::zero() {
            continue;
        }
        v[..len].iter_mut().for_each(|x| *x /= vnorm);
        // B <- H B H with H = I - 2 v v^T on the trailing block.
        for i in 0..len {
            let row = &m[(k + 1 + i) * n + k + 1..(k + 1 + i) * n + n];
            p[i] = dot(row, &v[..len]);
        }
        let kk = dot(&p[..len], &v[..len]);
        for i in 0..len {
            p[i] -= kk * v[i];
        }
        for i in 0..len {
            let base = (k + 1 + i) * n + k + 1;
            for j in 0..len {
                m[base + j] -= two * (v[i] * p[j] + p[i] * v[j]);
            }
        }
    }
    if n >= 2 {
        e[n - 2] = m[(n - 1) * n + n - 2];
    }
    e[n - 1] = T::zero();
    let d = (0..n).map(|i| m[i * n + i]).collect();
    (d, e)
}

/// Implicit QL with Wilkinson-type shifts on a symmetric tridiagonal matrix;
/// eigenvalues are left in `d`.
fn tridiagonal_ql<T: Real>(d: &mut [T], e: &mut [T]) -> Result<()> {
    let n = d.len();
    let two = T::lit(2.0);
    // Off-diagonals below eps * ||T|| are negligible even where the
    // neighbouring diagonal entries are tiny.
    let floor = T::epsilon()
        * d.iter()
            .zip(e.iter())
            .fold(T::zero(), |acc, (&a, &b)| acc.max(a.abs() + b.abs()));
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= T::epsilon() * dd || e[m].abs() <= floor {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::Numerical {
                    message: "tridiagonal QL did not converge".into(),
                    residual: e[l].abs().as_f64(),
                });
            }
            let mut g = (d[l + 1] - d[l]) / (two * e[l]);
            let mut r = g.hypot(T::one());
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (T::one(), T::one(), T::zero());
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == T::zero() {
                    d[i + 1] -= p;
                    e[m] = T::zero();
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + two * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = T::zero();
        }
    }
    Ok(())
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky factorization.
pub fn cholesky_solve<T: Real>(a: &DenseMatrix<T>, b: &[T]) -> Result<Vec<T>> {
    check_symmetric(a)?;
    let n = a.rows();
    if b.len() != n {
        return Err(Error::Dimension(format!(
            "rhs of length {} for a {n}x{n} system",
            b.len()
        )));
    }
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > T::zero()) {
            return Err(Error::Numerical {
                message: format!("matrix is not positive definite (pivot {j})"),
                residual: diag.as_f64(),
            });
        }
        let djj = diag.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let v = l[i * n + k] * y[k];
            y[i] -= v;
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = l[k * n + i] * y[k];
            y[i] -= v;
        }
        y[i] /= l[i * n + i];
    }
    Ok(y)
}

/// Least-squares solution of `min ||A x - b||` for a tall matrix of full
/// column rank, by Householder QR (avoids squaring the condition number).
pub fn least_squares<T: Real>(a: &DenseMatrix<T>, b: &[T]) -> Result<Vec<T>> {
    let (m, n) = (a.rows(), a.cols());
    if b.len() != m {
        return Err(Error::Dimension(format!("rhs of length {} for {m} rows", b.len())));
    }
    if n == 0 || m < n {
        return Err(Error::Input(format!(
            "least squares needs rows >= cols >= 1, got {m}x{n}"
        )));
    }
    // Column-major working copy.
    let mut q: Vec<Vec<T>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut rhs = b.to_vec();
    let scale = a.max_abs();
    for k in 0..n {
        let xnorm = norm2(&q[k][k..]);
        if xnorm <= T::epsilon() * scale * T::from_count(m) {
            return Err(Error::Numerical {
                message: format!("matrix is column-rank deficient at column {k}"),
                residual: xnorm.as_f64(),
            });
        }
        let alpha = if q[k][k] >= T::zero() { -xnorm } else { xnorm };
        let mut v = q[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm = norm2(&v);
        v.iter_mut().for_each(|x| *x /= vnorm);
        let two = T::lit(2.0);
        for col in q.iter_mut().skip(k + 1) {
            let s = two * dot(&v, &col[k..]);
            axpy(-s, &v, &mut col[k..]);
        }
        let s = two * dot(&v, &rhs[k..]);
        axpy(-s, &v, &mut rhs[k..]);
        q[k][k] = alpha;
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for j in i + 1..n {
            s -= q[j][i] * x[j];
        }
        x[i] = s / q[i][i];
    }
    Ok(x)
}

/// Settings for [`smallest_eig_inverse_iteration`].
#[derive(Debug, Clone, Copy)]
pub struct InverseIterationConfig<T> {
    /// Positive shift added to the operator so each solve is definite.
    pub shift: T,
    pub max_iters: usize,
    pub tolerance: T,
    pub seed: u64,
}

impl<T: Real> Default for InverseIterationConfig<T> {
    fn default() -> Self {
        Self {
            shift: T::lit(1e-10),
            max_iters: 200,
            tolerance: T::lit(1e-12).max(T::epsilon() * T::lit(8.0)),
            seed: 0,
        }
    }
}

/// Smallest eigenvalue of a positive semidefinite operator of size `dim` by
/// shifted inverse power iteration, with each solve done by CG.
pub fn smallest_eig_inverse_iteration<T: Real, F>(mut op: F, dim: usize, cfg: &InverseIterationConfig<T>) -> Result<T>
where
    F: FnMut(&[T], &mut [T]),
{
    if dim == 0 {
        return Err(Error::Input("operator dimension must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x: Vec<T> = (0..dim).map(|_| T::lit(rng.random::<f64>() - 0.5)).collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let cg = CgConfig {
        max_iters: 4 * dim,
        rel_tolerance: T::lit(1e-12).max(T::epsilon() * T::lit(64.0)),
    };
    let shift = cfg.shift;
    let mut ax = vec![T::zero(); dim];
    let mut lambda = T::infinity();
    for _ in 0..cfg.max_iters {
        let sol = cg_solve(
            |z: &[T], out: &mut [T]| {
                op(z, out);
                axpy(shift, z, out);
            },
            &x,
            &cg,
        )?;
        let mut y = sol.solution;
        let ny = norm2(&y);
        if ny == T::zero() || !ny.is_finite() {
            return Err(Error::Numerical {
                message: "inverse iteration produced a degenerate vector".into(),
                residual: ny.as_f64(),
            });
        }
        y.iter_mut().for_each(|v| *v /= ny);
        op(&y, &mut ax);
        let next = dot(&y, &ax);
        x = y;
        if (next - lambda).abs() <= cfg.tolerance * T::one().max(next.abs()) {
            return Ok(next.max(T::zero()));
        }
        lambda = next;
    }
    Ok(lambda.max(T::zero()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn to_na(m: &DenseMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
    }

    fn random_spd(n: usize, seed: u64) -> DenseMatrix<f64> {
        let b = random_matrix(n, n, seed);
        let mut g = b.gram(None);
        for i in 0..n {
            let v = g.get(i, i) + 1.0;
            g.set(i, i, v);
        }
        g
    }

    #[test]
    fn cg_identity_one_iteration() {
        let rhs = vec![1.0, -2.0, 3.5, 0.25];
        let sol = cg_solve(
            |x: &[f64], out: &mut [f64]| out.copy_from_slice(x),
            &rhs,
            &CgConfig::default(),
        )
        .unwrap();
        assert_eq!(sol.iters, 1);
        assert_eq!(sol.solution, rhs);
        assert!(sol.converged);
    }

    #[test]
    fn cg_diagonal() {
        let a = DenseMatrix::from_diag(&[1.0, 2.0, 4.0]);
        let sol = cg_solve(
            |x: &[f64], o: &mut [f64]| a.matvec_into(x, o),
            &[1.0, 2.0, 4.0],
            &CgConfig::default(),
        )
        .unwrap();
        for v in sol.solution {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn cg_matches_lu_oracle() {
        let a = random_spd(30, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cfg = CgConfig {
            max_iters: 100,
            rel_tolerance: 1e-12,
        };
        let sol = cg_solve(|x: &[f64], o: &mut [f64]| a.matvec_into(x, o), &b, &cfg).unwrap();
        let exact = to_na(&a).lu().solve(&DVector::from_vec(b)).unwrap();
        for (x, y) in sol.solution.iter().zip(exact.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn cg_reaches_tolerance_on_moderately_conditioned_system() {
        let n = 40;
        let diag: Vec<f64> = (0..n).map(|i| 10f64.powf(6.0 * i as f64 / (n - 1) as f64)).collect();
        // Rotate the diagonal spectrum with a random orthogonal matrix.
        let q = to_na(&random_matrix(n, n, 3)).qr().q();
        let a_na = &q * DMatrix::from_diagonal(&DVector::from_vec(diag)) * q.transpose();
        let a = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a_na[(i, j)] + a_na[(j, i)]));
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let cfg = CgConfig {
            max_iters: 20 * n,
            rel_tolerance: 1e-8,
        };
        let sol = cg_solve(|x: &[f64], o: &mut [f64]| a.matvec_into(x, o), &b, &cfg).unwrap();
        let mut ax = a.matvec(&sol.solution);
        axpy(-1.0, &b, &mut ax);
        assert!(norm2(&ax) <= 1e-8 * norm2(&b) * 1.01, "true residual {}", norm2(&ax));
    }

    #[test]
    fn cg_error_energy_norm_is_monotone() {
        let a = random_spd(25, 11);
        let b: Vec<f64> = (0..25).map(|i| (i as f64 * 0.7).cos()).collect();
        let exact: Vec<f64> = to_na(&a)
            .lu()
            .solve(&DVector::from_column_slice(&b))
            .unwrap()
            .iter()
            .copied()
            .collect();
        let mut prev = f64::INFINITY;
        for k in 1..=25 {
            let cfg = CgConfig {
                max_iters: k,
                rel_tolerance: 1e-15,
            };
            let x = cg_solve(|x: &[f64], o: &mut [f64]| a.matvec_into(x, o), &b, &cfg)
                .unwrap()
                .solution;
            let err: Vec<f64> = x.iter().zip(&exact).map(|(a, b)| a - b).collect();
            let energy = dot(&err, &a.matvec(&err)).sqrt();
            assert!(energy <= prev * (1.0 + 10.0 * f64::EPSILON) + 1e-14);
            prev = energy;
        }
    }

    #[test]
    fn cg_reports_negative_curvature_and_nan() {
        let a = DenseMatrix::from_diag(&[1.0, -1.0]);
        let sol = cg_solve(
            |x: &[f64], o: &mut [f64]| a.matvec_into(x, o),
            &[0.0, 1.0],
            &CgConfig::default(),
        )
        .unwrap();
        assert!(sol.negative_curvature);
        assert!(!sol.converged);
        let err = cg_solve(
            |_: &[f64], o: &mut [f64]| o.fill(f64::NAN),
            &[1.0],
            &CgConfig::default(),
        );
        assert!(matches!(err, Err(Error::Numerical { .. })));
        assert!(cg_solve(
            |x: &[f64], o: &mut [f64]| o.copy_from_slice(x),
            &[f64::INFINITY],
            &CgConfig::default()
        )
        .is_err());
    }

    #[test]
    fn line_search_examples() {
        let cfg = LineSearchConfig::default();
        let out = backtracking_step(|t: f64| (t - 1.0).powi(2), 1.0, &cfg).unwrap();
        assert_eq!((out.t, out.evals, out.rejected), (1.0, 1, false));

        let out = backtracking_step(|t: f64| t, 1.0, &cfg).unwrap();
        assert_eq!((out.t, out.evals, out.rejected), (0.0, cfg.max_backtracks, true));

        let mut first = None;
        backtracking_step(
            |t: f64| {
                if t > 0.0 && first.is_none() {
                    first = Some(t);
                }
                -t
            },
            50.0,
            &cfg,
        )
        .unwrap();
        assert_eq!(first, Some(0.1));
        assert_eq!(cfg.first_trial(50.0), 0.1);

        assert!(matches!(
            backtracking_step(|_t: f64| f64::NAN, 1.0, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn line_search_halves() {
        let cfg = LineSearchConfig::default();
        // Decrease only for t <= 0.25.
        let out = backtracking_step(|t: f64| if t <= 0.25 { -t } else { 1.0 }, 1.0, &cfg).unwrap();
        assert_eq!((out.t, out.evals), (0.25, 3));
    }

    #[test]
    fn cholesky_matches_lu() {
        let a = random_spd(15, 21);
        let b: Vec<f64> = (0..15).map(|i| 1.0 + i as f64).collect();
        let x = cholesky_solve(&a, &b).unwrap();
        let oracle = to_na(&a).lu().solve(&DVector::from_column_slice(&b)).unwrap();
        for (u, v) in x.iter().zip(oracle.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
        let indefinite = DenseMatrix::from_diag(&[1.0, -1.0]);
        assert!(cholesky_solve(&indefinite, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn least_squares_matches_svd_oracle() {
        let a = random_matrix(30, 8, 31);
        let b: Vec<f64> = (0..30).map(|i| (i as f64).cos()).collect();
        let x = least_squares(&a, &b).unwrap();
        let oracle = to_na(&a)
            .svd(true, true)
            .solve(&DVector::from_column_slice(&b), 1e-14)
            .unwrap();
        for (u, v) in x.iter().zip(oracle.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
        let mut rank_deficient = random_matrix(6, 2, 1);
        for i in 0..6 {
            let v = rank_deficient.get(i, 0);
            rank_deficient.set(i, 1, 2.0 * v);
        }
        assert!(least_squares(&rank_deficient, &[1.0; 6]).is_err());
    }

    #[test]
    fn eig_examples() {
        assert!((smallest_eig_sym(&DenseMatrix::<f64>::identity(6)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            smallest_eig_sym(&DenseMatrix::from_diag(&[5.0, -2.0, 3.0])).unwrap(),
            -2.0
        );
        assert_eq!(smallest_eig_sym(&DenseMatrix::from_diag(&[4.0])).unwrap(), 4.0);
        let asym = DenseMatrix::new(2, 2, vec![1.0, 2.0, 2.1, 1.0]).unwrap();
        assert!(matches!(smallest_eig_sym(&asym), Err(Error::Input(_))));
    }

    #[test]
    fn eig_matches_dense_oracle() {
        for (n, seed) in [(40, 1u64), (2, 2), (3, 3), (17, 4), (64, 5)] {
            let b = random_matrix(n, n, seed);
            let a = DenseMatrix::from_fn(n, n, |i, j| b.get(i, j) + b.get(j, i));
            let mut ours = symmetric_eigenvalues(&a).unwrap();
            let mut oracle: Vec<f64> = to_na(&a).symmetric_eigenvalues().iter().copied().collect();
            oracle.sort_by(|x, y| x.partial_cmp(y).unwrap());
            ours.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let scale = oracle.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (x, y) in ours.iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-8 * scale, "n={n}: {x} vs {y}");
            }
            assert!((ours[0] - oracle[0]).abs() <= 1e-8 * oracle[0].abs().max(1e-300) + 1e-12 * scale);
        }
    }

    #[test]
    fn eig_f32() {
        let a = DenseMatrix::<f32>::from_diag(&[3.0, 0.5, 2.0]);
        assert_eq!(smallest_eig_sym(&a).unwrap(), 0.5);
    }

    #[test]
    fn inverse_iteration_matches_dense() {
        let j = random_matrix(60, 20, 9);
        let g = j.gram(None);
        let dense = smallest_eig_sym(&g).unwrap();
        let it = smallest_eig_inverse_iteration(
            |z: &[f64], out: &mut [f64]| g.matvec_into(z, out),
            20,
            &InverseIterationConfig::default(),
        )
        .unwrap();
        assert!((it - dense).abs() <= 1e-8 * dense);
    }

    #[test]
    fn op_norm_matches_svd() {
        let a = random_matrix(30, 12, 4);
        let svd = to_na(&a).svd(false, false);
        let top = svd.singular_values.iter().fold(0.0f64, |m, &x| m.max(x));
        assert!((a.op_norm() - top).abs() < 1e-9 * top);
    }

    #[test]
    fn gram_matches_product() {
        let a = random_matrix(9, 5, 2);
        let w: Vec<f64> = (0..9).map(|i| 0.1 + i as f64).collect();
        let g = a.gram(Some(&w));
        let na = to_na(&a);
        let oracle = na.transpose() * DMatrix::from_diagonal(&DVector::from_vec(w)) * &na;
        for i in 0..5 {
            for j in 0..5 {
                assert!((g.get(i, j) - oracle[(i, j)]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn line_search_never_increases(a in -3.0f64..3.0, b in -3.0f64..3.0, c in 0.0f64..3.0, dn in 0.0f64..100.0) {
            let f = |t: f64| c * t * t + a * t + b * (3.0 * t).sin();
            let out = backtracking_step(f, dn, &LineSearchConfig::default()).unwrap();
            prop_assert!(out.value <= f(0.0));
            if !out.rejected {
                prop_assert!(f(out.t) < f(0.0));
                prop_assert!(out.t * dn <= 5.0 * (1.0 + 1e-15));
            } else {
                prop_assert_eq!(out.t, 0.0);
            }
        }

        #[test]
        fn smallest_eig_below_rayleigh_quotients(seed in 0u64..1000) {
            let j = random_matrix(12, 6, seed);
            let g = j.gram(None);
            let lmin = smallest_eig_sym(&g).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..5 {
                let z: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
                let rq = dot(&z, &g.matvec(&z)) / dot(&z, &z);
                prop_assert!(lmin <= rq * (1.0 + 1e-12) + 1e-12);
            }
        }
    }
}
