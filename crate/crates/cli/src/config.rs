//! Experiment configuration: presets, flat `key = value` files and overrides.
//!
//! Values are resolved as preset defaults, then the config file, then
//! command-line overrides, all through [`ExperimentConfig::set`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use neural_mms::linalg::{CgConfig, LineSearchConfig};
use neural_mms::mms::PretrainMethod;
use neural_mms::network::Init;
use neural_mms::solvers::{AdamConfig, GdConfig, GnConfig};

use crate::targets::Formula;
use crate::{io_err, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Track1d,
    Regress10d,
    CsvRegression,
    Custom,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Track1d => "track1d",
            Self::Regress10d => "regress10d",
            Self::CsvRegression => "csv_regression",
            Self::Custom => "custom",
        })
    }
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "track1d" => Ok(Self::Track1d),
            "regress10d" => Ok(Self::Regress10d),
            "csv_regression" => Ok(Self::CsvRegression),
            "custom" => Ok(Self::Custom),
            _ => Err(bad("preset", format!("unknown preset '{s}'"))),
        }
    }
}

/// Entry of the solver sweep; `Exact` emits only the reference trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Gn,
    Adam,
    Gd,
    Exact,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gn => "gn",
            Self::Adam => "adam",
            Self::Gd => "gd",
            Self::Exact => "exact",
        })
    }
}

impl FromStr for SolverKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gn" => Ok(Self::Gn),
            "adam" => Ok(Self::Adam),
            "gd" => Ok(Self::Gd),
            "exact" => Ok(Self::Exact),
            _ => Err(bad("solvers", format!("unknown solver '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    UniformGrid,
    IidUniform,
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::UniformGrid => "uniform-grid",
            Self::IidUniform => "iid-uniform",
        })
    }
}

impl FromStr for Sampling {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-grid" => Ok(Self::UniformGrid),
            "iid-uniform" => Ok(Self::IidUniform),
            _ => Err(bad("sampling", format!("unknown sampling '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSource {
    Builtin(Formula),
    Csv {
        path: PathBuf,
        features: Vec<String>,
        column: String,
        standardize: bool,
    },
}

/// Initial condition: the freshly initialized network, or a formula the
/// network is pretrained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialCondition {
    Network,
    Pretrained(Formula),
}

/// Where the exact reference trajectory starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceStart {
    /// The network's initial output `u^0_NN`.
    Network,
    /// The prescribed initial formula (falls back to the network output).
    Prescribed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub tau: f64,
    pub outer_steps: usize,
    pub solvers: Vec<SolverKind>,
    pub grid_lower: f64,
    pub grid_upper: f64,
    /// Points per axis for a uniform grid, total points for iid sampling.
    pub grid_count: usize,
    pub grid_dim: usize,
    pub sampling: Sampling,
    pub target: TargetSource,
    /// Held-out points for the relative error (0: use the training grid).
    pub test_count: usize,
    pub hidden: Vec<usize>,
    pub init: Init,
    pub initial: InitialCondition,
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    pub pretrain_method: PretrainMethod,
    pub gn: GnConfig<f64>,
    pub adam: AdamConfig<f64>,
    pub gd: GdConfig<f64>,
    pub theory: bool,
    pub lipschitz_samples: usize,
    pub lipschitz_radius: f64,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub cbar: Option<f64>,
    pub eta: Option<f64>,
    pub reference_start: ReferenceStart,
    pub output_dir: PathBuf,
    pub parallel: bool,
}

fn bad(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, format!("cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, format!("expected a boolean, got '{value}'"))),
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn opt_str(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            seed: 0,
            tau: 0.1,
            outer_steps: 30,
            solvers: vec![SolverKind::Gn],
            grid_lower: -1.0,
            grid_upper: 1.0,
            grid_count: 256,
            grid_dim: 1,
            sampling: Sampling::UniformGrid,
            target: TargetSource::Builtin(Formula::MixedTrig),
            test_count: 1000,
            hidden: vec![32],
            init: Init::XavierNormalZeroBias,
            initial: InitialCondition::Pretrained(Formula::Square),
            pretrain_iters: 2000,
            pretrain_lr: 1e-3,
            pretrain_method: PretrainMethod::Adam,
            gn: GnConfig {
                lm_damping: 1e-3,
                ..GnConfig::default()
            },
            adam: AdamConfig::default(),
            gd: GdConfig::default(),
            theory: true,
            lipschitz_samples: 64,
            lipschitz_radius: 1e-2,
            epsilon: 0.0,
            delta: None,
            cbar: None,
            eta: None,
            reference_start: ReferenceStart::Network,
            output_dir: PathBuf::from("out"),
            parallel: false,
        };
        match preset {
            Preset::Track1d | Preset::Custom => base,
            Preset::Regress10d => Self {
                grid_count: 1000,
                grid_dim: 10,
                sampling: Sampling::IidUniform,
                target: TargetSource::Builtin(Formula::CosSum),
                initial: InitialCondition::Network,
                lipschitz_samples: 0,
                ..base
            },
            Preset::CsvRegression => Self {
                target: TargetSource::Csv {
                    path: PathBuf::new(),
                    features: Vec::new(),
                    column: String::new(),
                    standardize: true,
                },
                test_count: 0,
                initial: InitialCondition::Network,
                lipschitz_samples: 0,
                ..base
            },
        }
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("config line {}: expected key = value", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Resolves preset defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file_pairs = match file {
            Some(p) => Self::parse_pairs(&fs::read_to_string(p).map_err(io_err(p))?)?,
            None => Vec::new(),
        };
        let is_preset = |(k, _): &&(String, String)| normalize(k) == "preset";
        let preset = overrides
            .iter()
            .rev()
            .find(is_preset)
            .or_else(|| file_pairs.iter().rev().find(is_preset))
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Preset::Track1d);
        let mut cfg = Self::preset(preset);
        for (k, v) in file_pairs.iter().chain(overrides) {
            if normalize(k) != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn csv_target(&mut self) -> (&mut PathBuf, &mut Vec<String>, &mut String, &mut bool) {
        if !matches!(self.target, TargetSource::Csv { .. }) {
            self.target = TargetSource::Csv {
                path: PathBuf::new(),
                features: Vec::new(),
                column: String::new(),
                standardize: true,
            };
        }
        match &mut self.target {
            TargetSource::Csv {
                path,
                features,
                column,
                standardize,
            } => (path, features, column, standardize),
            TargetSource::Builtin(_) => unreachable!(),
        }
    }

    /// Sets one key; `-` and `_` are interchangeable in keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = normalize(key);
        let k = k.as_str();
        match k {
            "preset" => self.preset = value.parse()?,
            "seed" => self.seed = parse(k, value)?,
            "tau" => self.tau = parse(k, value)?,
            "outer_steps" => self.outer_steps = parse(k, value)?,
            "solvers" => self.solvers = list(value).map(str::parse).collect::<Result<_>>()?,
            "grid_lower" => self.grid_lower = parse(k, value)?,
            "grid_upper" => self.grid_upper = parse(k, value)?,
            "grid_count" => self.grid_count = parse(k, value)?,
            "grid_dim" => self.grid_dim = parse(k, value)?,
            "sampling" => self.sampling = value.parse()?,
            "target" => self.target = TargetSource::Builtin(value.parse()?),
            "target_csv" => *self.csv_target().0 = PathBuf::from(value),
            "features" => *self.csv_target().1 = list(value).map(str::to_string).collect(),
            "target_column" => *self.csv_target().2 = value.to_string(),
            "standardize" => *self.csv_target().3 = parse_bool(k, value)?,
            "test_count" => self.test_count = parse(k, value)?,
            "hidden" if value == "none" => self.hidden = Vec::new(),
            "hidden" => self.hidden = list(value).map(|v| parse(k, v)).collect::<Result<_>>()?,
            "init" => self.init = value.parse().map_err(|e| bad(k, format!("{e}")))?,
            "initial" if value == "network" => self.initial = InitialCondition::Network,
            "initial" => self.initial = InitialCondition::Pretrained(value.parse()?),
            "pretrain_iters" => self.pretrain_iters = parse(k, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(k, value)?,
            "pretrain_method" => {
                self.pretrain_method = match value {
                    "adam" => PretrainMethod::Adam,
                    "gn" => PretrainMethod::GaussNewton,
                    _ => return Err(bad(k, format!("expected adam or gn, got '{value}'"))),
                }
            }
            "gn_inner_steps" => self.gn.inner_steps = parse(k, value)?,
            "lm_damping" => self.gn.lm_damping = parse(k, value)?,
            "cg_max_iters" => self.gn.cg.max_iters = parse(k, value)?,
            "cg_tolerance" => self.gn.cg.rel_tolerance = parse(k, value)?,
            "ls_contraction" => self.gn.line_search.contraction = parse(k, value)?,
            "ls_max_backtracks" => self.gn.line_search.max_backtracks = parse(k, value)?,
            "ls_max_step_norm" => self.gn.line_search.max_step_norm = parse(k, value)?,
            "ls_initial_step" => self.gn.line_search.initial_step = parse(k, value)?,
            "adam_lr" => self.adam.learning_rate = parse(k, value)?,
            "adam_beta1" => self.adam.beta1 = parse(k, value)?,
            "adam_beta2" => self.adam.beta2 = parse(k, value)?,
            "adam_eps" => self.adam.eps = parse(k, value)?,
            "adam_iters" => self.adam.inner_iters = parse(k, value)?,
            "gd_lr" => self.gd.learning_rate = parse(k, value)?,
            "gd_iters" => self.gd.inner_iters = parse(k, value)?,
            "theory" => self.theory = parse_bool(k, value)?,
            "lipschitz_samples" => self.lipschitz_samples = parse(k, value)?,
            "lipschitz_radius" => self.lipschitz_radius = parse(k, value)?,
            "epsilon" => self.epsilon = parse(k, value)?,
            "delta" => self.delta = parse_opt(k, value)?,
            "cbar" => self.cbar = parse_opt(k, value)?,
            "eta" => self.eta = parse_opt(k, value)?,
            "reference_start" => {
                self.reference_start = match value {
                    "network" => ReferenceStart::Network,
                    "prescribed" => ReferenceStart::Prescribed,
                    _ => return Err(bad(k, format!("expected network or prescribed, got '{value}'"))),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "parallel" => self.parallel = parse_bool(k, value)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(bad("tau", "must be positive"));
        }
        if self.outer_steps == 0 {
            return Err(bad("outer_steps", "must be >= 1"));
        }
        if self.solvers.is_empty() {
            return Err(bad("solvers", "at least one solver is required"));
        }
        if self.grid_count == 0 || self.grid_dim == 0 {
            return Err(bad("grid_count", "grid needs at least one point and dimension"));
        }
        if !(self.grid_lower < self.grid_upper) {
            return Err(bad("grid_lower", "must be below grid_upper"));
        }
        if self.sampling == Sampling::UniformGrid && self.grid_dim > 1 {
            let total = (self.grid_count as f64).powi(self.grid_dim as i32);
            if total > 1e6 {
                return Err(bad("grid_count", format!("uniform grid would have {total} points")));
            }
        }
        if let TargetSource::Csv {
            path, features, column, ..
        } = &self.target
        {
            if path.as_os_str().is_empty() {
                return Err(bad("target_csv", "a CSV target needs a path"));
            }
            if features.is_empty() || column.is_empty() {
                return Err(bad("features", "a CSV target needs features and target_column"));
            }
            if self.reference_start == ReferenceStart::Prescribed {
                return Err(bad("reference_start", "prescribed start needs a builtin target"));
            }
        }
        self.gn.validate()?;
        self.adam.validate()?;
        if let Some(d) = self.delta {
            if !(d > 0.0) {
                return Err(bad("delta", "must be positive"));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(bad("epsilon", "must be nonnegative"));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let (target, csv_path, features, column, standardize) = match &self.target {
            TargetSource::Builtin(f) => (
                f.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ),
            TargetSource::Csv {
                path,
                features,
                column,
                standardize,
            } => (
                String::new(),
                path.display().to_string(),
                features.join(","),
                column.clone(),
                standardize.to_string(),
            ),
        };
        let join = |v: &[usize]| {
            if v.is_empty() {
                "none".to_string()
            } else {
                v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            }
        };
        let CgConfig {
            max_iters,
            rel_tolerance,
        } = self.gn.cg;
        let LineSearchConfig {
            contraction,
            max_backtracks,
            max_step_norm,
            initial_step,
        } = self.gn.line_search;
        vec![
            ("preset", self.preset.to_string()),
            ("seed", self.seed.to_string()),
            ("tau", self.tau.to_string()),
            ("outer_steps", self.outer_steps.to_string()),
            (
                "solvers",
                self.solvers.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("grid_lower", self.grid_lower.to_string()),
            ("grid_upper", self.grid_upper.to_string()),
            ("grid_count", self.grid_count.to_string()),
            ("grid_dim", self.grid_dim.to_string()),
            ("sampling", self.sampling.to_string()),
            ("target", target),
            ("target_csv", csv_path),
            ("features", features),
            ("target_column", column),
            ("standardize", standardize),
            ("test_count", self.test_count.to_string()),
            ("hidden", join(&self.hidden)),
            ("init", self.init.to_string()),
            (
                "initial",
                match self.initial {
                    InitialCondition::Network => "network".to_string(),
                    InitialCondition::Pretrained(f) => f.to_string(),
                },
            ),
            ("pretrain_iters", self.pretrain_iters.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            (
                "pretrain_method",
                match self.pretrain_method {
                    PretrainMethod::Adam => "adam",
                    PretrainMethod::GaussNewton => "gn",
                }
                .to_string(),
            ),
            ("gn_inner_steps", self.gn.inner_steps.to_string()),
            ("lm_damping", self.gn.lm_damping.to_string()),
            ("cg_max_iters", max_iters.to_string()),
            ("cg_tolerance", rel_tolerance.to_string()),
            ("ls_contraction", contraction.to_string()),
            ("ls_max_backtracks", max_backtracks.to_string()),
            ("ls_max_step_norm", max_step_norm.to_string()),
            ("ls_initial_step", initial_step.to_string()),
            ("adam_lr", self.adam.learning_rate.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("adam_iters", self.adam.inner_iters.to_string()),
            ("gd_lr", self.gd.learning_rate.to_string()),
            ("gd_iters", self.gd.inner_iters.to_string()),
            ("theory", self.theory.to_string()),
            ("lipschitz_samples", self.lipschitz_samples.to_string()),
            ("lipschitz_radius", self.lipschitz_radius.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("delta", opt_str(self.delta)),
            ("cbar", opt_str(self.cbar)),
            ("eta", opt_str(self.eta)),
            (
                "reference_start",
                match self.reference_start {
                    ReferenceStart::Network => "network",
                    ReferenceStart::Prescribed => "prescribed",
                }
                .to_string(),
            ),
            ("output_dir", self.output_dir.display().to_string()),
            ("parallel", self.parallel.to_string()),
        ]
    }

    /// The resolved configuration as a config file.
    pub fn render(&self) -> String {
        self.pairs()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}
