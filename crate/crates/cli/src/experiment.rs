//! Experiment setup, solver sweeps and output files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use neural_mms::hilbert::{
    distance, fmt_real, norm, EnergyFunctional, GridFunction, QuadraticRegressionEnergy, SampleGrid,
};
use neural_mms::mms::{
    pretrain_initial, run_mms, write_iterates_csv, write_trajectory_csv, InnerSolver, MmsConfig, MmsRun, PretrainConfig,
};
use neural_mms::network::{MlpArchitecture, MlpModel};
use neural_mms::reference::{Evaluation, ExactTrajectory};
use neural_mms::theory::{
    certificate_summary, certify_records, certify_tracking, default_dbar, inner_horizon_T, inner_iters_K,
    lambda_budget, write_certificate_csv, TheoryConstants, TheoryOptions, TrackingCertificate,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, InitialCondition, ReferenceStart, Sampling, SolverKind, TargetSource};
use crate::ingest::{ingest_csv, write_scaling, ColumnScaling, CsvSchema};
use crate::{io_err, CliError, Result};

/// Everything shared by the runs of one sweep.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub grid: Arc<SampleGrid<f64>>,
    pub target: GridFunction<f64>,
    pub energy: QuadraticRegressionEnergy<f64>,
    pub initial: MlpModel<f64>,
    pub pretrain_fit_error: Option<f64>,
    pub reference: ExactTrajectory<f64>,
    /// Held-out grid with the target sampled on it.
    pub test: Option<GridFunction<f64>>,
    pub scaling: Vec<ColumnScaling>,
}

/// One row of the sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub solver: SolverKind,
    pub steps: usize,
    pub final_energy: f64,
    pub final_tracking_error: f64,
    /// `||u - f*|| / ||f*||` on the test points (training grid without them).
    pub rel_l2: f64,
    pub wall_time: f64,
    pub stalled_steps: usize,
    pub certificate_passed: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SolverOutcome {
    pub solver: SolverKind,
    /// `None` for the exact reference.
    pub run: Option<MmsRun<f64>>,
    pub certificate: TrackingCertificate<f64>,
    /// Constants at the first outer step.
    pub constants: Option<TheoryConstants<f64>>,
    /// Threshold and budget lines for the certificate report.
    pub notes: Vec<String>,
    pub summary: SummaryRow,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcomes: Vec<SolverOutcome>,
    pub output_dir: PathBuf,
}

impl ExperimentReport {
    pub fn certificates_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.certificate.passed)
    }

    pub fn failed_runs(&self) -> Vec<SolverKind> {
        self.outcomes
            .iter()
            .filter(|o| o.summary.failure.is_some())
            .map(|o| o.solver)
            .collect()
    }
}

fn axis(lower: f64, upper: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lower + upper)];
    }
    (0..n)
        .map(|i| lower + (upper - lower) * i as f64 / (n - 1) as f64)
        .collect()
}

fn sample_points(cfg: &ExperimentConfig, count: usize, sampling: Sampling, stream: u64) -> Vec<Vec<f64>> {
    let (lo, hi, d) = (cfg.grid_lower, cfg.grid_upper, cfg.grid_dim);
    match sampling {
        Sampling::UniformGrid => {
            let ax = axis(lo, hi, count);
            let total = count.pow(d as u32);
            (0..total)
                .map(|mut k| {
                    (0..d)
                        .map(|_| {
                            let v = ax[k % count];
                            k /= count;
                            v
                        })
                        .collect()
                })
                .collect()
        }
        Sampling::IidUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            (0..count)
                .map(|_| (0..d).map(|_| rng.random_range(lo..hi)).collect())
                .collect()
        }
    }
}

impl Experiment {
    /// Builds the grid, target, initial network and exact reference.
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (grid, target, scaling, formula) = match &config.target {
            TargetSource::Builtin(f) => {
                let pts = sample_points(config, config.grid_count, config.sampling, 1);
                let grid = Arc::new(SampleGrid::uniform(pts)?);
                let target = GridFunction::from_fn(Arc::clone(&grid), |x| f.eval(x));
                (grid, target, Vec::new(), Some(*f))
            }
            TargetSource::Csv {
                path,
                features,
                column,
                standardize,
            } => {
                let schema = CsvSchema {
                    features: features.clone(),
                    target: column.clone(),
                };
                let got = ingest_csv(path, &schema, *standardize)?;
                (got.grid, got.target, got.scaling, None)
            }
        };
        let arch = MlpArchitecture::new(grid.dim(), config.hidden.clone(), 1)?.with_init(config.init);
        let (initial, pretrain_fit_error) = match config.initial {
            InitialCondition::Network => (MlpModel::initialize(arch, config.seed)?, None),
            InitialCondition::Pretrained(f) => {
                let u0 = GridFunction::from_fn(Arc::clone(&grid), |x| f.eval(x));
                let pre = pretrain_initial(
                    arch,
                    &u0,
                    &grid,
                    &PretrainConfig {
                        iters: config.pretrain_iters,
                        learning_rate: config.pretrain_lr,
                        method: config.pretrain_method,
                        tolerance: 0.0,
                    },
                    config.seed,
                )?;
                log::info!(
                    "pretraining: fit error {} after {} iterations",
                    pre.fit_error,
                    pre.iters
                );
                (pre.model, Some(pre.fit_error))
            }
        };
        let start = match (config.reference_start, config.initial) {
            (ReferenceStart::Prescribed, InitialCondition::Pretrained(f)) => {
                GridFunction::from_fn(Arc::clone(&grid), |x| f.eval(x))
            }
            _ => initial.forward(&grid)?,
        };
        let reference = ExactTrajectory::compute(&start, &target, config.tau, config.outer_steps, Evaluation::Closed)?;
        let test = match (formula, config.test_count) {
            (Some(f), n) if n > 0 => {
                let sampling = if config.grid_dim == 1 {
                    Sampling::UniformGrid
                } else {
                    Sampling::IidUniform
                };
                let pts = sample_points(config, n, sampling, 2);
                let g = Arc::new(SampleGrid::uniform(pts)?);
                Some(GridFunction::from_fn(g, |x| f.eval(x)))
            }
            _ => None,
        };
        Ok(Self {
            config: config.clone(),
            energy: QuadraticRegressionEnergy::new(target.clone()),
            grid,
            target,
            initial,
            pretrain_fit_error,
            reference,
            test,
            scaling,
        })
    }

    pub fn mms_config(&self, solver: InnerSolver<f64>) -> MmsConfig<f64> {
        let c = &self.config;
        MmsConfig {
            tau: c.tau,
            outer_steps: c.outer_steps,
            solver,
            seed: c.seed,
            theory: c.theory.then_some(TheoryOptions {
                lipschitz_samples: c.lipschitz_samples,
                lipschitz_radius: c.lipschitz_radius,
                epsilon: c.epsilon,
                delta: c.delta,
                seed: c.seed,
            }),
        }
    }

    fn relative_error(&self, model: Option<&MlpModel<f64>>, on_grid: &GridFunction<f64>) -> Result<f64> {
        let (u, f) = match (model, &self.test) {
            (Some(m), Some(test)) => (m.forward(test.grid())?, test.clone()),
            _ => (on_grid.clone(), self.target.clone()),
        };
        let scale = norm(&f);
        let d = distance(&u, &f)?;
        Ok(if scale > 0.0 { d / scale } else { d })
    }

    /// Runs one sweep entry.
    pub fn run_solver(&self, kind: SolverKind) -> Result<SolverOutcome> {
        let c = &self.config;
        let started = Instant::now();
        let solver = match kind {
            SolverKind::Gn => InnerSolver::GaussNewton(c.gn),
            SolverKind::Adam => InnerSolver::Adam(c.adam),
            SolverKind::Gd => InnerSolver::GradientDescent(c.gd),
            SolverKind::Exact => return self.exact_outcome(started),
        };
        let run = run_mms(
            &self.initial,
            &self.mms_config(solver),
            &self.energy,
            &self.grid,
            Some(&self.reference.steps),
        )?;
        let wall_time = started.elapsed().as_secs_f64();
        let rho = 1.0 / (1.0 + c.tau * self.energy.strong_convexity());
        let certificate = if run.records.is_empty() {
            TrackingCertificate {
                rho,
                epsilon: c.epsilon,
                steps: Vec::new(),
                global: Vec::new(),
                sup_error: f64::NAN,
                passed: false,
            }
        } else {
            certify_records(&run.tracking_rows(), rho, c.epsilon)?
        };
        let constants = run.records.first().and_then(|r| r.theory);
        let notes = self.notes(&run, constants.as_ref());
        let last = run.iterates.last().expect("run keeps the initial iterate");
        let summary = SummaryRow {
            solver: kind,
            steps: run.records.len(),
            final_energy: self.energy.value(last)?,
            final_tracking_error: run.records.last().map_or(f64::NAN, |r| r.tracking_error),
            rel_l2: self.relative_error(Some(&run.model), last)?,
            wall_time,
            stalled_steps: run.records.iter().filter(|r| r.stalled).count(),
            certificate_passed: certificate.passed,
            failure: run.failure.as_ref().map(|f| format!("step {}: {}", f.step, f.message)),
        };
        Ok(SolverOutcome {
            solver: kind,
            run: Some(run),
            certificate,
            constants,
            notes,
            summary,
        })
    }

    fn exact_outcome(&self, started: Instant) -> Result<SolverOutcome> {
        let c = &self.config;
        let steps = &self.reference.steps;
        let certificate = certify_tracking(steps, steps, &self.energy, c.tau, c.epsilon)?;
        let last = steps.last().expect("trajectory has a start");
        let summary = SummaryRow {
            solver: SolverKind::Exact,
            steps: steps.len() - 1,
            final_energy: self.energy.value(last)?,
            final_tracking_error: certificate.steps.last().map_or(0.0, |s| s.error_end),
            rel_l2: self.relative_error(None, last)?,
            wall_time: started.elapsed().as_secs_f64(),
            stalled_steps: 0,
            certificate_passed: certificate.passed,
            failure: None,
        };
        Ok(SolverOutcome {
            solver: SolverKind::Exact,
            run: None,
            certificate,
            constants: None,
            notes: Vec::new(),
            summary,
        })
    }

    fn notes(&self, run: &MmsRun<f64>, constants: Option<&TheoryConstants<f64>>) -> Vec<String> {
        let mut notes = Vec::new();
        let Some(k) = constants else {
            return notes;
        };
        if k.delta.is_some() {
            if let Some(cbar) = self.config.cbar {
                match inner_horizon_T(cbar, k) {
                    Ok(t) => notes.push(format!(
                        "inner horizon T = {}{}",
                        fmt_real(t.value),
                        if t.clamped {
                            " (log argument below one, clamped)"
                        } else {
                            ""
                        }
                    )),
                    Err(e) => notes.push(format!("inner horizon T unavailable: {e}")),
                }
            }
            if let (Some(eta), Some(first)) = (self.config.eta, run.records.first()) {
                let dbar = default_dbar(first.energy_start, k.nu);
                match inner_iters_K(dbar, eta, k) {
                    Ok(n) => notes.push(format!("inner iterations K = {n} (Dbar = {})", fmt_real(dbar))),
                    Err(e) => notes.push(format!("inner iterations K unavailable: {e}")),
                }
            }
        }
        if let Some(l_hat) = k.l_hat {
            let budget = lambda_budget(&run.tracking_rows(), k.lambda_hat, l_hat);
            notes.push(match budget.exhausted_at {
                Some(n) => format!("lambda budget exhausted at step {n}"),
                None => format!(
                    "lambda budget positive throughout (final {})",
                    fmt_real(*budget.proxy.last().unwrap_or(&k.lambda_hat))
                ),
            });
            if !budget.violations.is_empty() {
                notes.push(format!(
                    "lambda proxy above empirical value at steps {:?}",
                    budget.violations
                ));
            }
        }
        notes
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_outcome(exp: &Experiment, o: &SolverOutcome, dir: &Path) -> Result<()> {
    let name = o.solver.to_string();
    let path = |suffix: &str| dir.join(format!("{name}_{suffix}"));
    match &o.run {
        Some(run) => {
            write_trajectory_csv(&run.records, create(&path("trajectory.csv"))?)?;
            write_iterates_csv(&run.iterates, create(&path("iterates.csv"))?)?;
            let p = path("checkpoint.txt");
            run.model.save_checkpoint(&p)?;
        }
        None => {
            exp.reference
                .write_csv(create(&path("trajectory.csv"))?, |u| exp.energy.value(u))?;
            write_iterates_csv(&exp.reference.steps, create(&path("iterates.csv"))?)?;
        }
    }
    write_certificate_csv(&o.certificate, create(&path("certificate.csv"))?)?;
    let mut text = certificate_summary(&o.certificate, o.constants.as_ref());
    for n in &o.notes {
        text.push_str(n);
        text.push('\n');
    }
    if let Some(f) = &o.summary.failure {
        text.push_str(&format!("run failed at {f}\n"));
    }
    let p = path("certificate.txt");
    fs::write(&p, text).map_err(io_err(&p))?;
    Ok(())
}

/// Writes `solver,steps,final_energy,final_tracking_error,rel_l2,wall_time,stalled_steps,certificate,failure`.
pub fn write_summary<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "solver",
        "steps",
        "final_energy",
        "final_tracking_error",
        "rel_l2",
        "wall_time",
        "stalled_steps",
        "certificate",
        "failure",
    ])?;
    for r in rows {
        w.write_record([
            r.solver.to_string(),
            r.steps.to_string(),
            fmt_real(r.final_energy),
            fmt_real(r.final_tracking_error),
            fmt_real(r.rel_l2),
            format!("{:.6e}", r.wall_time),
            r.stalled_steps.to_string(),
            if r.certificate_passed { "pass" } else { "fail" }.to_string(),
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err("summary"))?;
    Ok(())
}

/// Prepares the experiment, runs every solver of the sweep and writes the
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let cfg_path = dir.join("config.txt");
    fs::write(&cfg_path, cfg.render()).map_err(io_err(&cfg_path))?;
    let exp = Experiment::prepare(cfg)?;
    if !exp.scaling.is_empty() {
        write_scaling(&exp.scaling, create(&dir.join("standardization.csv"))?)?;
    }
    if let Some(e) = exp.pretrain_fit_error {
        let p = dir.join("pretrain.txt");
        fs::write(&p, format!("fit_error = {}\n", fmt_real(e))).map_err(io_err(&p))?;
        exp.initial.save_checkpoint(dir.join("initial_checkpoint.txt"))?;
    }
    let outcomes: Vec<Result<SolverOutcome>> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg
                .solvers
                .iter()
                .map(|&k| {
                    let exp = &exp;
                    s.spawn(move || exp.run_solver(k))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(CliError::Input("solver thread panicked".into())))
                })
                .collect()
        })
    } else {
        cfg.solvers.iter().map(|&k| exp.run_solver(k)).collect()
    };
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    for o in &outcomes {
        write_outcome(&exp, o, &dir)?;
        log::info!(
            "{}: final energy {}, tracking error {}, certificate {}",
            o.solver,
            o.summary.final_energy,
            o.summary.final_tracking_error,
            if o.certificate.passed { "pass" } else { "fail" }
        );
    }
    let rows: Vec<SummaryRow> = outcomes.iter().map(|o| o.summary.clone()).collect();
    write_summary(&rows, create(&dir.join("summary.csv"))?)?;
    Ok(ExperimentReport {
        outcomes,
        output_dir: dir,
    })
}
