use nalgebra::{DMatrix, DVector};
use ndarray::{array, Array2};

use smnarx::basis::{enumerate_basis, BasisConfig};
use smnarx::dataset::{split_dataset, TrajectoryDataset};
use smnarx::em::{fit, fit_training_set, initialize, m_step, FitConfig, Phase, TrainingSet, Variant};
use smnarx::inference::e_step;
use smnarx::model::SmnarxModel;
use smnarx::simulate::{simulate, InputLaw, TrueSystem};

fn small_config() -> BasisConfig {
    BasisConfig::new(1, 1, 1, 2).unwrap()
}

/// Two modes on `[1, y1, u1, y1^2, y1 u1, u1^2]`.
fn two_mode_system(sigma2: f64) -> TrueSystem {
    let basis = enumerate_basis(small_config());
    let (y1, u1) = (0, 1);
    let mut theta = Array2::zeros((2, basis.len()));
    theta[[0, basis.index_of_factors(&[(y1, 1)]).unwrap()]] = 0.5;
    theta[[0, basis.index_of_factors(&[(u1, 1)]).unwrap()]] = 1.0;
    theta[[1, basis.index_of_factors(&[(y1, 1)]).unwrap()]] = -0.4;
    theta[[1, basis.index_of_factors(&[(u1, 2)]).unwrap()]] = 0.8;
    let model = SmnarxModel {
        basis,
        theta,
        sigma2,
        transition: array![[0.95, 0.05], [0.1, 0.9]],
        initial: vec![0.5, 0.5],
    };
    TrueSystem::new(model, InputLaw::Uniform { lo: -1.0, hi: 1.0 }).unwrap()
}

fn data(sigma2: f64, n: usize, seed: u64) -> TrajectoryDataset {
    let raw = simulate(&two_mode_system(sigma2), n, seed).unwrap();
    split_dataset(&raw, n - 200, 100, 100, 100).unwrap()
}

#[test]
fn single_mode_em_is_least_squares() {
    let dataset = data(0.01, 1200, 3);
    let train = TrainingSet::from_dataset(small_config(), &dataset).unwrap();
    let config = FitConfig {
        modes: 1,
        variant: Variant::Em,
        restarts: 1,
        coord_tol: 1e-13,
        max_sweeps: 100_000,
        ..FitConfig::default()
    };
    let report = fit_training_set(&train, &config).unwrap();

    let phi = &train.design.phi;
    let x = DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, j| phi[[i, j]]);
    let y = DVector::from_vec(train.design.targets.clone());
    let ls = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
    for (a, b) in report.model.theta.row(0).iter().zip(ls.iter()) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    let rss = (&y - &x * &ls).norm_squared();
    assert!((report.model.sigma2 - rss / phi.nrows() as f64).abs() < 1e-10);
    assert_eq!(report.model.transition, array![[1.0]]);
}

#[test]
fn recovers_noiseless_system_on_known_support() {
    let truth = two_mode_system(0.0);
    let dataset = data(0.0, 2200, 11);
    let basis = enumerate_basis(small_config());
    let supports: Vec<Vec<usize>> = truth.model.supports();
    let config = FitConfig {
        modes: 2,
        variant: Variant::Em,
        lambda: 0.0,
        restarts: 4,
        active_sets: Some(supports.clone()),
        coord_tol: 1e-13,
        max_sweeps: 100_000,
        ..FitConfig::default()
    };
    let report = fit(&dataset, small_config(), &config).unwrap();
    let perm = smnarx::match_modes(&report.model, &truth.model).unwrap();
    let est = report.model.permuted(&perm);
    for s in 0..2 {
        for j in 0..basis.len() {
            let (a, b) = (est.theta[[s, j]], truth.model.theta[[s, j]]);
            assert!((a - b).abs() < 1e-6, "mode {s} term {j}: {a} vs {b}");
        }
    }
}

#[test]
fn selected_restart_has_highest_likelihood() {
    let dataset = data(0.01, 1200, 5);
    let config = FitConfig {
        modes: 2,
        restarts: 4,
        max_iters: 15,
        ..FitConfig::default()
    };
    let report = fit(&dataset, small_config(), &config).unwrap();
    let best = report
        .restart_logliks
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    assert_eq!(report.restart_logliks[report.restart_selected], Some(best));
    assert_eq!(*report.loglik_trace.last().unwrap(), best);
}

#[test]
fn converged_fit_is_a_fixed_point() {
    let dataset = data(0.01, 2200, 7);
    let train = TrainingSet::from_dataset(small_config(), &dataset).unwrap();
    let truth = two_mode_system(0.01);
    let config = FitConfig {
        modes: 2,
        variant: Variant::Em,
        restarts: 3,
        max_iters: 500,
        converge_tol: 1e-10,
        active_sets: Some(truth.model.supports()),
        coord_tol: 1e-13,
        max_sweeps: 100_000,
        ..FitConfig::default()
    };
    let report = fit_training_set(&train, &config).unwrap();
    assert!(report.converged);
    let post = e_step(&report.model, &train.design).unwrap();
    let active: Vec<Option<Vec<usize>>> = truth.model.supports().into_iter().map(Some).collect();
    let next = m_step(&train, &post, &report.model, &active, &config, Phase::BurnIn).unwrap();
    let shift = (&next.model.theta - &report.model.theta).iter().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(shift < 1e-4, "theta moved by {shift}");
    assert!((next.model.sigma2 / report.model.sigma2 - 1.0).abs() < 1e-4);
}

#[test]
fn restarts_are_reproducible() {
    let dataset = data(0.01, 1200, 5);
    let train = TrainingSet::from_dataset(small_config(), &dataset).unwrap();
    let config = FitConfig {
        modes: 2,
        ..FitConfig::default()
    };
    let (a, ga, _, _) = initialize(&train, &config, 2).unwrap();
    let (b, gb, _, _) = initialize(&train, &config, 2).unwrap();
    let (_, gc, _, _) = initialize(&train, &config, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
    assert_ne!(ga, gc);
}
