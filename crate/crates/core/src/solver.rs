//! Weighted ℓ1-penalized least squares by cyclical coordinate descent, plus
//! the hard-thresholding stage.
//!
//! The objective is
//!
//! ```text
//! sum_k w_k (y_k - sum_i theta_i phi_i(x_k))^2 + lambda * sum_i |theta_i|
//! ```
//!
//! with no column standardization and the constant term penalized like
//! every other coefficient. Each coordinate update is
//! `theta_i <- soft(rho_i, lambda / 2) / z_i` where `rho_i` is the weighted
//! correlation of column `i` with the partial residual that excludes `i`
//! and `z_i = sum_k w_k phi_{i,k}^2`.
//!
//! The solver works on weighted sufficient statistics (Gram matrix,
//! `Phi^T W y`, `y^T W y`), so a sweep costs `O(n^2)` regardless of the
//! number of samples.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("lambda must be finite and non-negative, got {0}")]
    Lambda(f64),
    #[error("weights must be finite and non-negative with a positive sum")]
    Weights,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid solver settings: {0}")]
    Settings(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    /// Convergence when the largest coefficient change in a full sweep is
    /// below this value.
    pub coord_tol: f64,
    pub max_sweeps: usize,
    pub warm_start: Option<Vec<f64>>,
    /// Record the objective after every sweep.
    pub track_objective: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            coord_tol: 1e-8,
            max_sweeps: 1000,
            warm_start: None,
            track_objective: false,
        }
    }
}

impl SolverSettings {
    fn validate(&self, n: usize) -> Result<(), SolverError> {
        if !(self.coord_tol > 0.0) {
            return Err(SolverError::Settings("coord_tol must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(SolverError::Settings("max_sweeps must be at least 1".into()));
        }
        if let Some(w) = &self.warm_start {
            if w.len() != n {
                return Err(SolverError::Dimension(format!(
                    "warm start has {} entries, expected {n}",
                    w.len()
                )));
            }
        }
        Ok(())
    }
}

/// A weighted, penalized regression posed on raw samples.
#[derive(Debug, Clone, Copy)]
pub struct WeightedRegressionProblem<'a> {
    pub design: ArrayView2<'a, f64>,
    pub targets: &'a [f64],
    pub weights: &'a [f64],
    pub lambda: f64,
    /// Coordinates allowed to be nonzero; `None` means all.
    pub active_set: Option<&'a [usize]>,
}

/// Weighted sufficient statistics of a regression problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSystem {
    /// `Phi^T W Phi`.
    pub gram: Array2<f64>,
    /// `Phi^T W y`.
    pub xty: Vec<f64>,
    /// `y^T W y`.
    pub yty: f64,
    /// `sum_k w_k`.
    pub weight_sum: f64,
}

impl GramSystem {
    pub fn from_samples(
        design: ArrayView2<f64>,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<Self, SolverError> {
        let (rows, n) = design.dim();
        if targets.len() != rows || weights.len() != rows {
            return Err(SolverError::Dimension(format!(
                "{rows} design rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(SolverError::Weights);
        }
        let weight_sum: f64 = weights.iter().sum();
        if !(weight_sum > 0.0) {
            return Err(SolverError::Weights);
        }
        let mut gram = Array2::zeros((n, n));
        let mut xty = vec![0.0; n];
        let mut yty = 0.0;
        for ((row, &y), &w) in design.rows().into_iter().zip(targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            yty += w * y * y;
            for i in 0..n {
                let wi = w * row[i];
                xty[i] += wi * y;
                for j in i..n {
                    gram[[i, j]] += wi * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                gram[[i, j]] = gram[[j, i]];
            }
        }
        Ok(GramSystem {
            gram,
            xty,
            yty,
            weight_sum,
        })
    }

    pub fn dim(&self) -> usize {
        self.xty.len()
    }

    /// Weighted residual sum of squares `sum_k w_k (y_k - phi_k theta)^2`.
    pub fn residual_ss(&self, theta: &[f64]) -> f64 {
        let n = self.dim();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..n {
            if theta[i] == 0.0 {
                continue;
            }
            lin += theta[i] * self.xty[i];
            let mut row = 0.0;
            for j in 0..n {
                row += self.gram[[i, j]] * theta[j];
            }
            quad += theta[i] * row;
        }
        (self.yty - 2.0 * lin + quad).max(0.0)
    }

    pub fn objective(&self, theta: &[f64], lambda: f64) -> f64 {
        self.residual_ss(theta) + lambda * theta.iter().map(|v| v.abs()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub coefficients: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    /// Active coordinates with a zero weighted column, forced to zero.
    pub degenerate: Vec<usize>,
    pub objective: f64,
    pub objective_trace: Vec<f64>,
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Minimizes the weighted lasso objective for `problem`.
pub fn solve_weighted_lasso(
    problem: &WeightedRegressionProblem<'_>,
    settings: &SolverSettings,
) -> Result<LassoSolution, SolverError> {
    let system = GramSystem::from_samples(problem.design, problem.targets, problem.weights)?;
    solve_gram_lasso(&system, problem.lambda, problem.active_set, settings)
}

/// Coordinate descent on precomputed sufficient statistics.
pub fn solve_gram_lasso(
    system: &GramSystem,
    lambda: f64,
    active_set: Option<&[usize]>,
    settings: &SolverSettings,
) -> Result<LassoSolution, SolverError> {
    let n = system.dim();
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(SolverError::Lambda(lambda));
    }
    if system.gram.dim() != (n, n) {
        return Err(SolverError::Dimension("gram matrix shape".into()));
    }
    settings.validate(n)?;

    let mut active: Vec<usize> = match active_set {
        Some(a) => {
            let mut a = a.to_vec();
            a.sort_unstable();
            a.dedup();
            if a.last().is_some_and(|&i| i >= n) {
                return Err(SolverError::Dimension("active set index out of range".into()));
            }
            a
        }
        None => (0..n).collect(),
    };
    let mut theta = settings.warm_start.clone().unwrap_or_else(|| vec![0.0; n]);
    let in_active = {
        let mut mask = vec![false; n];
        active.iter().for_each(|&i| mask[i] = true);
        mask
    };
    for (i, t) in theta.iter_mut().enumerate() {
        if !in_active[i] {
            *t = 0.0;
        }
    }
    let g = &system.gram;
    let mut degenerate = Vec::new();
    active.retain(|&i| {
        let ok = g[[i, i]] > 0.0 && g[[i, i]].is_finite();
        if !ok {
            theta[i] = 0.0;
            degenerate.push(i);
        }
        ok
    });
    if !degenerate.is_empty() {
        log::debug!("degenerate columns forced to zero: {degenerate:?}");
    }

    let half_lambda = 0.5 * lambda;
    // grad[i] = xty_i - sum_j G_ij theta_j, kept for active coordinates
    let mut grad = vec![0.0; n];
    let refresh = |theta: &[f64], grad: &mut [f64]| {
        for &i in &active {
            let mut v = system.xty[i];
            for &j in &active {
                v -= g[[i, j]] * theta[j];
            }
            grad[i] = v;
        }
    };
    let update = |i: usize, theta: &mut [f64], grad: &mut [f64]| -> f64 {
        let z = g[[i, i]];
        let rho = grad[i] + z * theta[i];
        let new = soft_threshold(rho, half_lambda) / z;
        let delta = new - theta[i];
        if delta != 0.0 {
            theta[i] = new;
            for &j in &active {
                grad[j] -= g[[j, i]] * delta;
            }
        }
        delta.abs()
    };

    let mut trace = Vec::new();
    let mut sweeps = 0;
    let mut converged = false;
    'outer: while sweeps < settings.max_sweeps {
        refresh(&theta, &mut grad);
        let mut max_change: f64 = 0.0;
        for &i in &active {
            max_change = max_change.max(update(i, &mut theta, &mut grad));
        }
        sweeps += 1;
        if settings.track_objective {
            trace.push(system.objective(&theta, lambda));
        }
        if max_change < settings.coord_tol {
            converged = true;
            break;
        }
        // iterate on the current nonzero set until it settles
        let nonzero: Vec<usize> = active.iter().copied().filter(|&i| theta[i] != 0.0).collect();
        loop {
            if sweeps >= settings.max_sweeps {
                break 'outer;
            }
            let mut change: f64 = 0.0;
            for &i in &nonzero {
                change = change.max(update(i, &mut theta, &mut grad));
            }
            sweeps += 1;
            if settings.track_objective {
                trace.push(system.objective(&theta, lambda));
            }
            if change < settings.coord_tol {
                break;
            }
        }
    }
    if !converged {
        log::debug!("coordinate descent stopped after {sweeps} sweeps without converging");
    }
    let objective = system.objective(&theta, lambda);
    Ok(LassoSolution {
        coefficients: theta,
        sweeps,
        converged,
        degenerate,
        objective,
        objective_trace: trace,
    })
}

/// `eta_0(x; t) = x * 1{|x| >= sqrt(2 t)}`.
pub fn eta0(x: f64, t: f64) -> f64 {
    if x.abs() >= (2.0 * t).sqrt() {
        x
    } else {
        0.0
    }
}

/// Second-stage selection: `eta_0(theta; upsilon^2 / 2)` elementwise, which
/// keeps exactly the entries with `|theta_i| >= upsilon`.
pub fn hard_threshold(theta: &[f64], upsilon: f64) -> Vec<f64> {
    let t = upsilon * upsilon / 2.0;
    theta.iter().map(|&x| eta0(x, t)).collect()
}

/// Indices of nonzero coefficients.
pub fn support_of(theta: &[f64]) -> Vec<usize> {
    theta
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn solve(
        x: &Array2<f64>,
        y: &[f64],
        w: &[f64],
        lambda: f64,
        active: Option<&[usize]>,
    ) -> LassoSolution {
        let p = WeightedRegressionProblem {
            design: x.view(),
            targets: y,
            weights: w,
            lambda,
            active_set: active,
        };
        solve_weighted_lasso(&p, &SolverSettings::default()).unwrap()
    }

    #[test]
    fn exact_fit_without_penalty() {
        let x = array![[1.0], [2.0]];
        let s = solve(&x, &[2.0, 4.0], &[1.0, 1.0], 0.0, None);
        assert!((s.coefficients[0] - 2.0).abs() < 1e-12);
        assert!(s.converged);
    }

    #[test]
    fn large_penalty_zeroes_everything() {
        let x = array![[1.0, 0.5], [2.0, -1.0], [0.3, 0.2]];
        let y = [1.0, 2.0, -0.5];
        let w = [1.0, 0.5, 2.0];
        let sys = GramSystem::from_samples(x.view(), &y, &w).unwrap();
        let max_corr = sys.xty.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let s = solve(&x, &y, &w, 2.0 * max_corr + 1e-9, None);
        assert_eq!(s.coefficients, vec![0.0, 0.0]);
        let s = solve(&x, &y, &w, 2.0 * max_corr * 0.9, None);
        assert!(s.coefficients.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn active_set_and_degenerate_columns() {
        let x = array![[1.0, 0.0, 3.0], [2.0, 0.0, 1.0], [3.0, 0.0, -1.0]];
        let y = [1.0, 2.0, 3.0];
        let w = [1.0, 1.0, 1.0];
        let s = solve(&x, &y, &w, 0.0, Some(&[0, 1]));
        assert_eq!(s.degenerate, vec![1]);
        assert_eq!(s.coefficients[1], 0.0);
        assert_eq!(s.coefficients[2], 0.0);
        assert!((s.coefficients[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_weight_rows_are_ignored() {
        let x = array![[1.0], [2.0], [5.0]];
        let s = solve(&x, &[2.0, 4.0, -100.0], &[1.0, 1.0, 0.0], 0.0, None);
        assert!((s.coefficients[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn input_validation() {
        let x = array![[1.0], [2.0]];
        let p = WeightedRegressionProblem {
            design: x.view(),
            targets: &[1.0, 2.0],
            weights: &[0.0, 0.0],
            lambda: 0.0,
            active_set: None,
        };
        assert_eq!(
            solve_weighted_lasso(&p, &SolverSettings::default()),
            Err(SolverError::Weights)
        );
        let p = WeightedRegressionProblem {
            weights: &[1.0, 1.0],
            lambda: -1.0,
            ..p
        };
        assert_eq!(
            solve_weighted_lasso(&p, &SolverSettings::default()),
            Err(SolverError::Lambda(-1.0))
        );
        let p = WeightedRegressionProblem { lambda: 0.0, ..p };
        let bad = SolverSettings {
            max_sweeps: 0,
            ..Default::default()
        };
        assert!(matches!(solve_weighted_lasso(&p, &bad), Err(SolverError::Settings(_))));
    }

    #[test]
    fn sweep_cap_reports_non_convergence() {
        let x = array![[1.0, 0.99], [1.0, 1.01], [1.0, 1.0]];
        let p = WeightedRegressionProblem {
            design: x.view(),
            targets: &[1.0, 2.0, 1.4],
            weights: &[1.0, 1.0, 1.0],
            lambda: 0.0,
            active_set: None,
        };
        let s = solve_weighted_lasso(
            &p,
            &SolverSettings {
                max_sweeps: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!s.converged);
        assert_eq!(s.sweeps, 2);
    }

    #[test]
    fn hard_threshold_examples() {
        assert_eq!(hard_threshold(&[0.04, 0.06, -0.04, -0.06], 0.05), vec![0.0, 0.06, 0.0, -0.06]);
        assert_eq!(hard_threshold(&[0.05, -0.05], 0.05), vec![0.05, -0.05]);
        let v = [0.0, 1e-300, -3.0, 2.5];
        assert_eq!(hard_threshold(&v, 0.0), v.to_vec());
    }

    #[test]
    fn supports() {
        assert!(support_of(&[0.0; 5]).is_empty());
        assert_eq!(support_of(&[0.0, 1.0, 0.0, -2.0]), vec![1, 3]);
        assert_eq!(support_of(&[1.0, 2.0, 3.0]), vec![0, 1, 2]);
    }
}
