//! Fully connected tanh networks with exact per-sample Jacobians.
//!
//! Parameters are stored layer by layer: the weight matrix
//! (`fan_out x fan_in`, row-major) followed by the bias vector. Hidden layers
//! apply `tanh`; the output layer is affine. A network without hidden layers
//! is therefore linear in its parameters with features `(x, 1)`.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::hilbert::{fmt_real, GridFunction, SampleGrid};
use crate::linalg::{smallest_eig_inverse_iteration, smallest_eig_sym, DenseMatrix, InverseIterationConfig};
use crate::scalar::{norm2, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Init {
    /// Xavier normal weights with the tanh gain 5/3, zero biases.
    XavierNormalZeroBias,
    /// Weights and biases uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    SmallUniform,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("tanh")
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Parameter(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::XavierNormalZeroBias => "xavier_normal_zero_bias",
            Self::SmallUniform => "small_uniform",
        })
    }
}

impl FromStr for Init {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xavier_normal_zero_bias" | "xavier" => Ok(Self::XavierNormalZeroBias),
            "small_uniform" => Ok(Self::SmallUniform),
            other => Err(Error::Parameter(format!("unknown init '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init: Init,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation: Activation::Tanh,
            init: Init::XavierNormalZeroBias,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Parameter("layer widths must all be positive".into()));
        }
        Ok(())
    }

    /// `[input_dim, hidden..., output_dim]`
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden_widths.len() + 2);
        s.push(self.input_dim);
        s.extend_from_slice(&self.hidden_widths);
        s.push(self.output_dim);
        s
    }

    /// `p = sum over layers of (fan_in + 1) * fan_out`
    pub fn param_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.layer_sizes()
            .windows(2)
            .map(|w| {
                let l = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset += (w[0] + 1) * w[1];
                l
            })
            .collect()
    }
}

impl fmt::Display for MlpArchitecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hidden: Vec<String> = self.hidden_widths.iter().map(|h| h.to_string()).collect();
        write!(
            f,
            "input_dim={} hidden={} output_dim={} activation={} init={}",
            self.input_dim,
            if hidden.is_empty() {
                "none".to_string()
            } else {
                hidden.join(",")
            },
            self.output_dim,
            self.activation,
            self.init
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weight(&self, params_len: usize) -> std::ops::Range<usize> {
        debug_assert!(self.offset + self.fan_in * self.fan_out <= params_len);
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

/// A network together with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    arch: MlpArchitecture,
    params: Vec<T>,
}

impl<T: Real> MlpModel<T> {
    pub fn new(arch: MlpArchitecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: MlpArchitecture) -> Result<Self> {
        let p = arch.param_count();
        Self::new(arch, vec![T::zero(); p])
    }

    /// Seeded initialization according to `arch.init`.
    pub fn initialize(arch: MlpArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); arch.param_count()];
        for layer in arch.layers() {
            let (fi, fo) = (layer.fan_in as f64, layer.fan_out as f64);
            match arch.init {
                Init::XavierNormalZeroBias => {
                    let std = (5.0 / 3.0) * (2.0 / (fi + fo)).sqrt();
                    let dist = Normal::new(0.0, std).expect("positive std");
                    for w in &mut params[layer.weight(usize::MAX)] {
                        *w = T::lit(dist.sample(&mut rng));
                    }
                }
                Init::SmallUniform => {
                    let bound = 1.0 / fi.sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                    let range = layer.offset..layer.bias().end;
                    for w in &mut params[range] {
                        *w = T::lit(dist.sample(&mut rng));
                    }
                }
            }
        }
        Self::new(arch, params)
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: Vec<T>) -> Result<Self> {
        Self::new(self.arch.clone(), params)
    }

    fn check_grid(&self, grid: &SampleGrid<T>) -> Result<()> {
        if grid.dim() != self.arch.input_dim {
            return Err(Error::Dimension(format!(
                "grid points have dimension {}, network expects {}",
                grid.dim(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Output vector at a single input point.
    pub fn evaluate(&self, x: &[T]) -> Vec<T> {
        let mut acts = Vec::new();
        self.forward_point(x, &mut acts);
        acts.pop().expect("at least one layer")
    }

    /// Activations of every layer (input first, output last).
    fn forward_point(&self, x: &[T], acts: &mut Vec<Vec<T>>) {
        acts.clear();
        acts.push(x.to_vec());
        let layers = self.arch.layers();
        let last = layers.len() - 1;
        for (l, layer) in layers.iter().enumerate() {
            let w = &self.params[layer.weight(self.params.len())];
            let b = &self.params[layer.bias()];
            let input = &acts[l];
            let mut out: Vec<T> = (0..layer.fan_out)
                .map(|o| {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    row.iter().zip(input).fold(b[o], |acc, (&a, &xi)| acc + a * xi)
                })
                .collect();
            if l != last {
                out.iter_mut().for_each(|z| *z = z.tanh());
            }
            acts.push(out);
        }
    }

    /// Outputs at every grid point, stacked as `values[i * C + c]`.
    pub fn forward_raw(&self, grid: &SampleGrid<T>) -> Result<Vec<T>> {
        self.check_grid(grid)?;
        let mut out = Vec::with_capacity(grid.len() * self.arch.output_dim);
        let mut acts = Vec::new();
        for x in grid.points() {
            self.forward_point(x, &mut acts);
            out.extend_from_slice(acts.last().expect("output layer"));
        }
        Ok(out)
    }

    /// Grid carrying the network outputs: `grid` itself for scalar outputs,
    /// otherwise the grid stacked `C` times.
    pub fn output_grid(&self, grid: &Arc<SampleGrid<T>>) -> Result<Arc<SampleGrid<T>>> {
        if self.arch.output_dim == 1 {
            Ok(Arc::clone(grid))
        } else {
            Ok(Arc::new(grid.stacked(self.arch.output_dim)?))
        }
    }

    /// The network as a function on the grid.
    pub fn forward(&self, grid: &Arc<SampleGrid<T>>) -> Result<GridFunction<T>> {
        let out = self.output_grid(grid)?;
        self.forward_on(grid, &out)
    }

    /// As [`MlpModel::forward`] with a precomputed output grid.
    pub fn forward_on(&self, grid: &SampleGrid<T>, output_grid: &Arc<SampleGrid<T>>) -> Result<GridFunction<T>> {
        GridFunction::new(Arc::clone(output_grid), self.forward_raw(grid)?)
    }

    /// Jacobian `d u(x_i) / d w_j`, one row per (point, output) pair.
    pub fn jacobian(&self, grid: &SampleGrid<T>) -> Result<DenseMatrix<T>> {
        Ok(self.forward_and_jacobian(grid)?.1)
    }

    /// Stacked outputs and the Jacobian from a single pass.
    pub fn forward_and_jacobian(&self, grid: &SampleGrid<T>) -> Result<(Vec<T>, DenseMatrix<T>)> {
        self.check_grid(grid)?;
        let c_out = self.arch.output_dim;
        let p = self.params.len();
        let layers = self.arch.layers();
        let mut values = Vec::with_capacity(grid.len() * c_out);
        let mut jac = DenseMatrix::zeros(grid.len() * c_out, p);
        let mut acts = Vec::new();
        for (i, x) in grid.points().enumerate() {
            self.forward_point(x, &mut acts);
            values.extend_from_slice(acts.last().expect("output layer"));
            for c in 0..c_out {
                let row = jac.row_mut(i * c_out + c);
                let mut delta = vec![T::zero(); c_out];
                delta[c] = T::one();
                for (l, layer) in layers.iter().enumerate().rev() {
                    let input = &acts[l];
                    let wrange = layer.weight(p);
                    for o in 0..layer.fan_out {
                        let d = delta[o];
                        row[layer.bias().start + o] = d;
                        let base = wrange.start + o * layer.fan_in;
                        for (k, &a) in input.iter().enumerate() {
                            row[base + k] = d * a;
                        }
                    }
                    if l == 0 {
                        break;
                    }
                    let w = &self.params[wrange];
                    let mut prev = vec![T::zero(); layer.fan_in];
                    for (o, &d) in delta.iter().enumerate() {
                        if d == T::zero() {
                            continue;
                        }
                        let wrow = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                        for (pk, &wk) in prev.iter_mut().zip(wrow) {
                            *pk += wk * d;
                        }
                    }
                    for (pk, &a) in prev.iter_mut().zip(input) {
                        *pk *= T::one() - a * a;
                    }
                    delta = prev;
                }
            }
        }
        Ok((values, jac))
    }

    /// Writes the architecture header line followed by one parameter per line.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# mlp {} params={}", self.arch, self.params.len())?;
        for &v in &self.params {
            writeln!(w, "{}", fmt_real(v))?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(f)
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().ok_or_else(|| Error::Input("empty checkpoint".into()))??;
        let arch = parse_header(&header)?;
        let mut params = Vec::with_capacity(arch.param_count());
        for (k, line) in lines.enumerate() {
            let line = line?;
            let s = line.trim();
            if s.is_empty() {
                continue;
            }
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Input(format!("checkpoint line {}: '{s}'", k + 2)))?;
            params.push(T::lit(v));
        }
        Self::new(arch, params)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}

fn parse_header(header: &str) -> Result<MlpArchitecture> {
    let body = header
        .strip_prefix("# mlp ")
        .ok_or_else(|| Error::Input("checkpoint header must start with '# mlp'".into()))?;
    let mut input_dim = None;
    let mut hidden = None;
    let mut output_dim = None;
    let mut activation = Activation::Tanh;
    let mut init = Init::XavierNormalZeroBias;
    for tok in body.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Input(format!("bad header token '{tok}'")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Input(format!("bad header value '{tok}'")))
        };
        match k {
            "input_dim" => input_dim = Some(num(v)?),
            "output_dim" => output_dim = Some(num(v)?),
            "hidden" if v == "none" => hidden = Some(Vec::new()),
            "hidden" => hidden = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?),
            "activation" => activation = v.parse()?,
            "init" => init = v.parse()?,
            "params" => {}
            _ => return Err(Error::Input(format!("unknown header key '{k}'"))),
        }
    }
    let missing = || Error::Input("checkpoint header is incomplete".into());
    let mut arch = MlpArchitecture::new(
        input_dim.ok_or_else(missing)?,
        hidden.ok_or_else(missing)?,
        output_dim.ok_or_else(missing)?,
    )?;
    arch.activation = activation;
    arch.init = init;
    Ok(arch)
}

/// Default size above which [`min_singular_value`] switches to inverse iteration.
pub const DENSE_EIG_LIMIT: usize = 2048;

/// `sigma_min(J) = sqrt(max(0, lambda_min(J^T J)))`.
pub fn min_singular_value<T: Real>(jac: &DenseMatrix<T>) -> Result<T> {
    min_singular_value_with(jac, None, DENSE_EIG_LIMIT)
}

/// `sigma_min(diag(w)^{1/2} J)`, the smallest singular value of the Jacobian
/// as a map into the weighted space.
pub fn weighted_min_singular_value<T: Real>(jac: &DenseMatrix<T>, weights: &[T]) -> Result<T> {
    min_singular_value_with(jac, Some(weights), DENSE_EIG_LIMIT)
}

/// Uses a dense eigensolver on the Gram matrix up to `dense_limit` columns
/// and matrix-free inverse iteration beyond.
pub fn min_singular_value_with<T: Real>(jac: &DenseMatrix<T>, weights: Option<&[T]>, dense_limit: usize) -> Result<T> {
    if jac.rows() == 0 || jac.cols() == 0 {
        return Err(Error::Input("empty Jacobian".into()));
    }
    if let Some(w) = weights {
        if w.len() != jac.rows() {
            return Err(Error::Dimension("weights do not match Jacobian rows".into()));
        }
    }
    let lambda = if jac.cols() <= dense_limit {
        smallest_eig_sym(&jac.gram(weights))?
    } else {
        let mut tmp = vec![T::zero(); jac.rows()];
        let scale = jac.op_norm();
        let cfg = InverseIterationConfig {
            shift: T::lit(1e-10).max(T::epsilon() * T::lit(64.0)) * scale * scale,
            ..Default::default()
        };
        smallest_eig_inverse_iteration(
            |z: &[T], out: &mut [T]| {
                jac.matvec_into(z, &mut tmp);
                if let Some(w) = weights {
                    tmp.iter_mut().zip(w).for_each(|(t, &wi)| *t *= wi);
                }
                jac.t_matvec_into(&tmp, out);
            },
            jac.cols(),
            &cfg,
        )?
    };
    Ok(lambda.max(T::zero()).sqrt())
}

/// Spectral norm of `diag(w)^{1/2} J`.
pub fn weighted_op_norm<T: Real>(jac: &DenseMatrix<T>, weights: &[T]) -> T {
    let s: Vec<T> = weights.iter().map(|w| w.sqrt()).collect();
    jac.scale_rows(&s).op_norm()
}

/// Result of [`estimate_jacobian_lipschitz`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate<T> {
    pub value: T,
    pub samples: usize,
    pub radius: T,
}

/// Empirical Jacobian-Lipschitz constant near the model's parameters:
/// the largest ratio `||J(w1) - J(w2)||_op / ||w1 - w2||` over `samples`
/// random pairs in the ball of the given radius, with the operator norm
/// taken into the weighted output space. A lower bound on the true constant.
pub fn estimate_jacobian_lipschitz<T: Real>(
    model: &MlpModel<T>,
    grid: &SampleGrid<T>,
    samples: usize,
    radius: T,
    seed: u64,
) -> Result<LipschitzEstimate<T>> {
    if samples == 0 || !(radius > T::zero()) {
        return Err(Error::Parameter(
            "lipschitz estimate needs samples >= 1 and radius > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.arch().output_dim;
    let weights: Vec<T> = grid
        .weights()
        .iter()
        .flat_map(|&w| std::iter::repeat_n((w / T::from_count(c)).sqrt(), c))
        .collect();
    let p = model.param_count();
    let mut best = T::zero();
    let perturb = |rng: &mut ChaCha8Rng| -> Vec<T> {
        let dir: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let r = rng.random::<f64>();
        model
            .params()
            .iter()
            .zip(&dir)
            .map(|(&w, &d)| w + radius * T::lit(r * d / n))
            .collect()
    };
    for _ in 0..samples {
        let w1 = perturb(&mut rng);
        let w2 = perturb(&mut rng);
        let dw: Vec<T> = w1.iter().zip(&w2).map(|(&a, &b)| a - b).collect();
        let dn = norm2(&dw);
        if dn == T::zero() {
            continue;
        }
        let j1 = model.with_params(w1)?.jacobian(grid)?;
        let j2 = model.with_params(w2)?.jacobian(grid)?;
        let diff = j1.sub(&j2)?.scale_rows(&weights);
        best = best.max(diff.op_norm_with(T::lit(1e-6), 200) / dn);
    }
    Ok(LipschitzEstimate {
        value: best,
        samples,
        radius,
    })
}
