//! Selection of the ℓ1 weight by validation RMSE.

use serde::{Deserialize, Serialize};

use crate::basis::{BasisConfig, DesignMatrix};
use crate::dataset::{Split, TrajectoryDataset};
use crate::em::{fit_training_set, EmError, FitConfig, TrainingSet, Variant};
use crate::inference::filter_sequence;
use crate::metrics::rmse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub rmse_validation: f64,
    pub final_loglik: f64,
    pub iterations: usize,
    /// Nonzero coefficients summed over modes.
    pub nonzero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_lambda: f64,
    pub best_rmse: f64,
    pub table: Vec<GridPoint>,
    /// Grid points skipped because of the patience rule.
    pub skipped: usize,
}

/// `size` log-spaced values from `hi` down to `lo`.
pub fn log_grid(lo: f64, hi: f64, size: usize) -> Result<Vec<f64>, EmError> {
    if size == 0 {
        return Err(EmError::EmptyGrid);
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(EmError::Config(format!("invalid lambda window ({lo}, {hi})")));
    }
    if size == 1 {
        return Ok(vec![hi]);
    }
    let (a, b) = (hi.ln(), lo.ln());
    Ok((0..size)
        .map(|i| (a + (b - a) * i as f64 / (size - 1) as f64).exp())
        .collect())
}

/// The configuration used for every grid point: ℓ1 EM stopped at the
/// burn-in tolerance.
pub fn burn_in_config(config: &FitConfig, lambda: f64) -> FitConfig {
    FitConfig {
        variant: Variant::EmL1,
        lambda,
        converge_tol: config.burn_in_tol,
        ..config.clone()
    }
}

/// Fits every λ in `lambdas` (in the given order) and scores one-step-ahead
/// RMSE on the validation split. With `patience`, the scan stops after that
/// many consecutive points without a new best RMSE.
pub fn evaluate_lambdas(
    dataset: &TrajectoryDataset,
    basis: BasisConfig,
    config: &FitConfig,
    lambdas: &[f64],
    patience: Option<usize>,
) -> Result<GridSearchResult, EmError> {
    if lambdas.is_empty() {
        return Err(EmError::EmptyGrid);
    }
    if dataset.segments_in(Split::Validation).next().is_none() {
        return Err(EmError::NoValidationData);
    }
    let train = TrainingSet::from_dataset(basis, dataset)?;
    let validation = DesignMatrix::build_filtered(&train.basis, dataset, |s| s.split == Split::Validation)?;

    let mut table: Vec<GridPoint> = Vec::new();
    let mut best: Option<usize> = None;
    let mut stale = 0;
    for &lambda in lambdas {
        let cfg = burn_in_config(config, lambda);
        cfg.validate()?;
        let report = fit_training_set(&train, &cfg)?;
        let mut yhat = Vec::with_capacity(validation.rows());
        for view in validation.segments() {
            yhat.extend(filter_sequence(&report.model, view)?.yhat);
        }
        let score = rmse(&yhat, &validation.targets).expect("validation rows are nonempty");
        log::info!("lambda {lambda:.3e}: validation rmse {score:.4}");
        table.push(GridPoint {
            lambda,
            rmse_validation: score,
            final_loglik: *report.loglik_trace.last().expect("nonempty trace"),
            iterations: report.iterations,
            nonzero: report.support_sizes.iter().sum(),
        });
        let improved = best.is_none_or(|b| score < table[b].rmse_validation);
        if improved {
            best = Some(table.len() - 1);
            stale = 0;
        } else {
            stale += 1;
            if patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    let b = &table[best.expect("at least one grid point")];
    Ok(GridSearchResult {
        best_lambda: b.lambda,
        best_rmse: b.rmse_validation,
        skipped: lambdas.len() - table.len(),
        table,
    })
}

/// Descending log-spaced search over `window` with early stopping.
pub fn grid_search_lambda(
    dataset: &TrajectoryDataset,
    basis: BasisConfig,
    config: &FitConfig,
    window: (f64, f64),
    grid_size: usize,
    patience: usize,
) -> Result<GridSearchResult, EmError> {
    let grid = log_grid(window.0, window.1, grid_size)?;
    evaluate_lambdas(dataset, basis, config, &grid, Some(patience))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_descending_and_log_spaced() {
        let g = log_grid(1e-6, 1e1, 8).unwrap();
        assert_eq!(g.len(), 8);
        for (v, e) in g.iter().zip([1e1, 1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6]) {
            assert!((v / e - 1.0).abs() < 1e-12, "{v} vs {e}");
        }
        assert_eq!(log_grid(1e-3, 1e-1, 1).unwrap(), vec![1e-1]);
        assert_eq!(log_grid(1e-3, 1e-1, 0), Err(EmError::EmptyGrid));
        assert!(log_grid(1.0, 0.1, 3).is_err());
        assert!(log_grid(0.0, 0.1, 3).is_err());
    }

    #[test]
    fn burn_in_config_stops_at_burn_in_tolerance() {
        let c = burn_in_config(&FitConfig::default(), 0.1);
        assert_eq!(c.variant, Variant::EmL1);
        assert_eq!(c.converge_tol, c.burn_in_tol);
        assert_eq!(c.lambda, 0.1);
        assert!(c.validate().is_ok());
    }
}
