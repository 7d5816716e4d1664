use std::sync::Arc;

use neural_mms::hilbert::{distance, EnergyFunctional, GridFunction, QuadraticRegressionEnergy, SampleGrid};
use neural_mms::mms::{
    pretrain_initial, run_mms, write_trajectory_csv, InnerSolver, MmsConfig, PretrainConfig, TrajectoryTable,
};
use neural_mms::network::MlpArchitecture;
use neural_mms::reference::{Evaluation, ExactTrajectory};
use neural_mms::solvers::GnConfig;
use neural_mms::theory::{certify_records, certify_tracking, TheoryOptions};
use neural_mms::{Function32, Grid, Grid32, Model32};

fn gn(damping: f64) -> InnerSolver<f64> {
    InnerSolver::GaussNewton(GnConfig {
        lm_damping: damping,
        ..Default::default()
    })
}

#[test]
fn pretrained_run_certifies_and_round_trips() {
    let grid: Arc<Grid> = Arc::new(SampleGrid::linspace(-1.0, 1.0, 64).unwrap());
    let target = GridFunction::from_fn(Arc::clone(&grid), |x| x[0] * x[0] + 0.2 * (3.0 * x[0]).cos());
    let start = GridFunction::from_fn(Arc::clone(&grid), |x| x[0] * x[0]);
    let arch = MlpArchitecture::new(1, vec![8], 1).unwrap();
    let cfg = PretrainConfig {
        iters: 500,
        ..Default::default()
    };
    let pre = pretrain_initial(arch, &start, &grid, &cfg, 0).unwrap();
    assert!(pre.fit_error.is_finite() && pre.iters == 500);

    let energy = QuadraticRegressionEnergy::new(target.clone());
    let u0 = pre.model.forward(&grid).unwrap();
    let tau = 0.1;
    let reference = ExactTrajectory::compute(&u0, &target, tau, 10, Evaluation::Closed).unwrap();
    let mut mms = MmsConfig::new(tau, 10, gn(1e-3));
    mms.theory = Some(TheoryOptions {
        lipschitz_samples: 4,
        ..Default::default()
    });
    let run = run_mms(&pre.model, &mms, &energy, &grid, Some(&reference.steps)).unwrap();
    assert!(run.is_complete());
    assert_eq!(
        (run.records.len(), run.iterates.len(), run.inner_traces.len()),
        (10, 11, 10)
    );
    assert!(run.records.iter().all(|r| r.energy_inequality_holds()));
    assert!(run.records.last().unwrap().energy < energy.value(&u0).unwrap());

    let direct = certify_tracking(&run.iterates, &reference.steps, &energy, tau, 0.0).unwrap();
    let rows = certify_records(&run.tracking_rows(), mms_rho(tau), 0.0).unwrap();
    assert!(direct.passed && rows.passed);
    assert!((direct.sup_error - rows.sup_error).abs() <= 1e-14);

    let mut buf = Vec::new();
    write_trajectory_csv(&run.records, &mut buf).unwrap();
    let table = TrajectoryTable::read(buf.as_slice()).unwrap();
    let reread = certify_records(&table.tracking_rows::<f64>().unwrap(), mms_rho(tau), 0.0).unwrap();
    assert_eq!(reread.passed, rows.passed);
    let errors = table.column("tracking_error").unwrap();
    for (e, r) in errors.iter().zip(&run.records) {
        assert_eq!(*e, r.tracking_error);
    }
    let last = distance(run.iterates.last().unwrap(), reference.steps.last().unwrap()).unwrap();
    assert_eq!(last, run.records.last().unwrap().tracking_error);
}

fn mms_rho(tau: f64) -> f64 {
    1.0 / (1.0 + tau)
}

#[test]
fn single_precision_run_decreases_energy() {
    let grid: Arc<Grid32> = Arc::new(SampleGrid::linspace(-1.0f32, 1.0, 32).unwrap());
    let target: Function32 = GridFunction::from_fn(Arc::clone(&grid), |x| (2.0 * x[0]).sin());
    let model = Model32::initialize(MlpArchitecture::new(1, vec![6], 1).unwrap(), 1).unwrap();
    let energy = QuadraticRegressionEnergy::new(target);
    let cfg = MmsConfig::new(
        0.1f32,
        5,
        InnerSolver::GaussNewton(GnConfig {
            lm_damping: 1e-3,
            ..Default::default()
        }),
    );
    let run = run_mms(&model, &cfg, &energy, &grid, None).unwrap();
    assert!(run.is_complete());
    let e0 = energy.value(&run.iterates[0]).unwrap();
    let e5 = run.records.last().unwrap().energy;
    assert!(e5 < e0, "{e5} >= {e0}");
    assert!(run.records.iter().all(|r| r.tracking_error.is_nan()));
}
