use approx::assert_relative_eq;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

use smnarx::basis::{binomial, enumerate_basis, BasisConfig, SegmentView};
use smnarx::inference::{filter_sequence, forward_backward};
use smnarx::metrics::{f_s, f_theta, match_modes, rmse};
use smnarx::model::SmnarxModel;
use smnarx::solver::{eta0, hard_threshold, solve_gram_lasso, GramSystem, SolverSettings};

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let t: f64 = v.iter().sum();
    v.into_iter().map(|x| x / t).collect()
}

/// A random small model on a one-lag, degree-2 dictionary with `s` modes.
fn model_strategy(s: usize) -> impl Strategy<Value = SmnarxModel> {
    let basis = enumerate_basis(BasisConfig::new(1, 1, 1, 2).unwrap());
    let n = basis.len();
    (
        prop::collection::vec(-1.0..1.0f64, s * n),
        0.05..1.0f64,
        prop::collection::vec(0.05..1.0f64, s * s),
        prop::collection::vec(0.05..1.0f64, s),
    )
        .prop_map(move |(theta, sigma2, a, pi)| {
            let mut transition = Array2::zeros((s, s));
            for i in 0..s {
                for (j, v) in normalize(a[i * s..(i + 1) * s].to_vec()).into_iter().enumerate() {
                    transition[[i, j]] = v;
                }
            }
            SmnarxModel::new(
                basis.clone(),
                Array2::from_shape_vec((s, n), theta).unwrap(),
                sigma2,
                transition,
                normalize(pi),
            )
            .unwrap()
        })
}

fn segment_strategy(len: std::ops::Range<usize>) -> impl Strategy<Value = (Array2<f64>, Vec<f64>)> {
    len.prop_flat_map(|rows| {
        (
            prop::collection::vec(-1.5..1.5f64, rows * 2),
            prop::collection::vec(-2.0..2.0f64, rows),
        )
            .prop_map(move |(x, y)| {
                let basis = enumerate_basis(BasisConfig::new(1, 1, 1, 2).unwrap());
                let mut phi = Array2::zeros((rows, basis.len()));
                for k in 0..rows {
                    let mut row = vec![0.0; basis.len()];
                    basis.evaluate_into(&x[2 * k..2 * k + 2], &mut row);
                    phi.row_mut(k).assign(&Array1::from(row));
                }
                (phi, y)
            })
    })
}

/// Unscaled forward-backward, feasible for short sequences.
fn naive_posteriors(model: &SmnarxModel, phi: &Array2<f64>, y: &[f64]) -> (Array2<f64>, f64) {
    let (n, s) = (y.len(), model.modes());
    let b = |k: usize, j: usize| {
        let r = y[k] - model.theta.row(j).dot(&phi.row(k));
        (-(r * r) / (2.0 * model.sigma2)).exp() / (2.0 * std::f64::consts::PI * model.sigma2).sqrt()
    };
    let mut alpha = Array2::<f64>::zeros((n, s));
    let mut beta = Array2::<f64>::ones((n, s));
    for j in 0..s {
        alpha[[0, j]] = model.initial[j] * b(0, j);
    }
    for k in 1..n {
        for j in 0..s {
            alpha[[k, j]] = (0..s).map(|i| alpha[[k - 1, i]] * model.transition[[i, j]]).sum::<f64>() * b(k, j);
        }
    }
    for k in (0..n - 1).rev() {
        for i in 0..s {
            beta[[k, i]] = (0..s)
                .map(|j| model.transition[[i, j]] * b(k + 1, j) * beta[[k + 1, j]])
                .sum();
        }
    }
    let lik: f64 = alpha.row(n - 1).sum();
    (&alpha * &beta / lik, lik.ln())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_size_is_binomial(n_a in 1usize..4, n_b in 1usize..4, q in 1usize..3, n_d in 1usize..4) {
        let cfg = BasisConfig::new(n_a, n_b, q, n_d).unwrap();
        let p = cfg.lag_len();
        let basis = enumerate_basis(cfg);
        prop_assert_eq!(basis.len(), binomial(p + n_d, n_d));
        prop_assert!(basis.terms()[0].iter().all(|&e| e == 0));
        let degrees: Vec<u32> = basis.terms().iter().map(|t| t.iter().sum()).collect();
        prop_assert!(degrees.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn basis_terms_are_monomials(x in prop::collection::vec(-2.0..2.0f64, 4)) {
        let basis = enumerate_basis(BasisConfig::new(2, 2, 1, 3).unwrap());
        let mut out = vec![0.0; basis.len()];
        basis.evaluate_into(&x, &mut out);
        for (t, v) in basis.terms().iter().zip(&out) {
            let direct: f64 = t.iter().zip(&x).map(|(&e, xi)| xi.powi(e as i32)).product();
            prop_assert!((v - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn scaled_posteriors_match_unscaled(model in model_strategy(3), (phi, y) in segment_strategy(1..9)) {
        let post = forward_backward(&model, SegmentView { phi: phi.view(), targets: &y }).unwrap();
        let (gamma, loglik) = naive_posteriors(&model, &phi, &y);
        prop_assert!((post.loglik - loglik).abs() < 1e-9);
        for (a, b) in post.gamma.iter().zip(gamma.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn posteriors_are_consistent(model in model_strategy(2), (phi, y) in segment_strategy(2..60)) {
        let post = forward_backward(&model, SegmentView { phi: phi.view(), targets: &y }).unwrap();
        for row in post.gamma.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&g| (0.0..=1.0 + 1e-12).contains(&g)));
        }
        for k in 0..y.len() - 1 {
            for i in 0..2 {
                let out: f64 = (0..2).map(|j| post.xi[[k, i, j]]).sum();
                let inc: f64 = (0..2).map(|j| post.xi[[k, j, i]]).sum();
                prop_assert!((out - post.gamma[[k, i]]).abs() < 1e-12);
                prop_assert!((inc - post.gamma[[k + 1, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filter_is_causal(
        model in model_strategy(3),
        (phi, y) in segment_strategy(3..30),
        cut in 0usize..30,
        noise in prop::collection::vec(-3.0..3.0f64, 30),
    ) {
        let cut = cut % y.len();
        let a = filter_sequence(&model, SegmentView { phi: phi.view(), targets: &y }).unwrap();
        let mut z = y.clone();
        for k in cut..z.len() {
            z[k] += noise[k];
        }
        let b = filter_sequence(&model, SegmentView { phi: phi.view(), targets: &z }).unwrap();
        for k in 0..=cut {
            prop_assert_eq!(a.f.row(k), b.f.row(k));
            prop_assert_eq!(a.yhat[k], b.yhat[k]);
        }
    }

    #[test]
    fn lasso_objective_decreases_and_is_optimal(
        rows in 10usize..60,
        n in 1usize..8,
        seed in prop::collection::vec(-1.0..1.0f64, 60 * 8 + 60),
        weights in prop::collection::vec(0.05..1.0f64, 60),
        lambda in 0.0..5.0f64,
    ) {
        let x = Array2::from_shape_fn((rows, n), |(i, j)| seed[i * 8 + j]);
        let y: Vec<f64> = (0..rows).map(|i| seed[480 + i] + x[[i, 0]]).collect();
        let system = GramSystem::from_samples(x.view(), &y, &weights[..rows]).unwrap();
        let settings = SolverSettings { coord_tol: 1e-12, max_sweeps: 100_000, track_objective: true, ..SolverSettings::default() };
        let sol = solve_gram_lasso(&system, lambda, None, &settings).unwrap();
        prop_assert!(sol.converged);
        let start = system.objective(&vec![0.0; n], lambda);
        let mut prev = start;
        for &o in &sol.objective_trace {
            prop_assert!(o <= prev + 1e-9 * (1.0 + prev.abs()));
            prev = o;
        }
        // subgradient condition of sum w r^2 + lambda |theta|_1
        for i in 0..n {
            let g: f64 = system.xty[i] - (0..n).map(|j| system.gram[[i, j]] * sol.coefficients[j]).sum::<f64>();
            let th = sol.coefficients[i];
            if th != 0.0 {
                prop_assert!((g - 0.5 * lambda * th.signum()).abs() < 1e-6);
            } else {
                prop_assert!(g.abs() <= 0.5 * lambda + 1e-6);
            }
        }
    }

    #[test]
    fn hard_threshold_keeps_or_zeroes(theta in prop::collection::vec(-1.0..1.0f64, 0..50), upsilon in 0.0..1.0f64) {
        let once = hard_threshold(&theta, upsilon);
        prop_assert_eq!(&hard_threshold(&once, upsilon), &once);
        for (a, b) in theta.iter().zip(&once) {
            prop_assert!(*b == 0.0 || b == a);
            prop_assert_eq!(*b != 0.0, a.abs() >= upsilon && *a != 0.0);
            prop_assert_eq!(*b, eta0(*a, upsilon * upsilon / 2.0));
        }
    }

    #[test]
    fn mode_accuracy_is_label_consistent(
        labels in prop::collection::vec((0usize..3, 0usize..3), 1..100),
        perm_idx in 0usize..6,
    ) {
        let perm = &smnarx::metrics::permutations(3)[perm_idx];
        let (a, b): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let pa: Vec<usize> = a.iter().map(|&i| perm[i]).collect();
        let pb: Vec<usize> = b.iter().map(|&i| perm[i]).collect();
        prop_assert_eq!(f_s(&a, &b).unwrap(), f_s(&pa, &pb).unwrap());
        prop_assert_eq!(f_s(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn rmse_behaves_like_a_distance(y in prop::collection::vec(-5.0..5.0f64, 1..50), c in -3.0..3.0f64) {
        prop_assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        assert_relative_eq!(rmse(&shifted, &y).unwrap(), c.abs(), epsilon = 1e-12);
        prop_assert_eq!(rmse(&shifted, &y).unwrap(), rmse(&y, &shifted).unwrap());
    }

    #[test]
    fn matching_undoes_a_relabeling(model in model_strategy(3), perm_idx in 0usize..6) {
        let perm = smnarx::metrics::permutations(3)[perm_idx].clone();
        let relabeled = model.permuted(&perm);
        let found = match_modes(&relabeled, &model).unwrap();
        let back = relabeled.permuted(&found);
        prop_assert_eq!(&back.theta, &model.theta);
        prop_assert_eq!(&back.transition, &model.transition);
        prop_assert_eq!(f_theta(back.theta.view(), model.theta.view()).unwrap(), 1.0);
    }
}
