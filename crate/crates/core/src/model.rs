//! The switched Markov polynomial NARX parameter set and its JSON form.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::PolynomialBasis;

/// Default lower bound on the shared noise variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;
const STOCHASTIC_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} of the transition matrix is not a distribution (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
    #[error("initial distribution is invalid (sum {0})")]
    BadInitial(f64),
    #[error("noise variance {0} is below the floor")]
    Variance(f64),
    #[error("coefficient index {index} out of range for a basis of {n} terms")]
    TermIndex { index: usize, n: usize },
}

/// Full parameter set: per-mode coefficients, shared variance, transition
/// matrix and initial mode distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SmnarxModel {
    pub basis: PolynomialBasis,
    /// `S x n`, row `s` holds the coefficients of mode `s`.
    pub theta: Array2<f64>,
    pub sigma2: f64,
    /// `a[i][j] = p(z_k = j | z_{k-1} = i)`.
    pub transition: Array2<f64>,
    pub initial: Vec<f64>,
}

pub(crate) fn check_distribution(v: ArrayView1<f64>, tol: f64) -> Result<(), f64> {
    let sum: f64 = v.sum();
    if v.iter().all(|&p| (0.0..=1.0).contains(&p)) && (sum - 1.0).abs() <= tol {
        Ok(())
    } else {
        Err(sum)
    }
}

impl SmnarxModel {
    pub fn new(
        basis: PolynomialBasis,
        theta: Array2<f64>,
        sigma2: f64,
        transition: Array2<f64>,
        initial: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let m = SmnarxModel {
            basis,
            theta,
            sigma2,
            transition,
            initial,
        };
        m.validate_with(STOCHASTIC_TOL, VARIANCE_FLOOR)?;
        Ok(m)
    }

    pub(crate) fn validate_with(&self, tol: f64, var_floor: f64) -> Result<(), ModelError> {
        let s = self.modes();
        if s == 0 {
            return Err(ModelError::Shape("at least one mode is required".into()));
        }
        if self.theta.ncols() != self.basis.len() {
            return Err(ModelError::Shape(format!(
                "theta has {} columns, basis has {} terms",
                self.theta.ncols(),
                self.basis.len()
            )));
        }
        if self.transition.dim() != (s, s) {
            return Err(ModelError::Shape(format!(
                "transition matrix is {:?}, expected {s}x{s}",
                self.transition.dim()
            )));
        }
        if self.initial.len() != s {
            return Err(ModelError::Shape("initial distribution length".into()));
        }
        for (row, r) in self.transition.rows().into_iter().enumerate() {
            check_distribution(r, tol).map_err(|sum| ModelError::NotStochastic { row, sum })?;
        }
        check_distribution(ArrayView1::from(&self.initial), tol).map_err(ModelError::BadInitial)?;
        if !(self.sigma2.is_finite() && self.sigma2 >= var_floor) {
            return Err(ModelError::Variance(self.sigma2));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Shape("non-finite coefficient".into()));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.theta.nrows()
    }

    /// Indices of the nonzero coefficients of each mode.
    pub fn supports(&self) -> Vec<Vec<usize>> {
        self.theta
            .rows()
            .into_iter()
            .map(|r| crate::solver::support_of(r.as_slice().expect("contiguous row")))
            .collect()
    }

    /// Per-mode predictor means `theta_s^T phi_k` for every row, `rows x S`.
    pub fn mode_means(&self, phi: ArrayView2<f64>) -> Array2<f64> {
        let s = self.modes();
        let supports = self.supports();
        let dense = supports.iter().any(|sup| sup.len() * 3 > self.basis.len());
        let mut out = Array2::zeros((phi.nrows(), s));
        if dense {
            ndarray::linalg::general_mat_mul(1.0, &phi, &self.theta.t(), 0.0, &mut out);
        } else {
            for (k, row) in phi.rows().into_iter().enumerate() {
                for (m, sup) in supports.iter().enumerate() {
                    out[[k, m]] = sup.iter().map(|&i| self.theta[[m, i]] * row[i]).sum();
                }
            }
        }
        out
    }

    /// Applies `perm` so that new mode `i` is old mode `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SmnarxModel {
        let s = self.modes();
        assert_eq!(perm.len(), s);
        let theta = Array2::from_shape_fn(self.theta.dim(), |(i, j)| self.theta[[perm[i], j]]);
        let transition = Array2::from_shape_fn((s, s), |(i, j)| self.transition[[perm[i], perm[j]]]);
        let initial = perm.iter().map(|&p| self.initial[p]).collect();
        SmnarxModel {
            basis: self.basis.clone(),
            theta,
            sigma2: self.sigma2,
            transition,
            initial,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TermValue {
    index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    term: Option<String>,
    value: f64,
}

/// On-disk layout shared by fitted models and true systems.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ModelRepr {
    basis: PolynomialBasis,
    modes: usize,
    theta: Vec<Vec<TermValue>>,
    sigma2: f64,
    transition: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

impl ModelRepr {
    pub(crate) fn from_model(m: &SmnarxModel) -> Self {
        let theta = m
            .theta
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(index, &value)| TermValue {
                        index,
                        term: Some(m.basis.term_label(index)),
                        value,
                    })
                    .collect()
            })
            .collect();
        ModelRepr {
            basis: m.basis.clone(),
            modes: m.modes(),
            theta,
            sigma2: m.sigma2,
            transition: m.transition.rows().into_iter().map(|r| r.to_vec()).collect(),
            initial: m.initial.clone(),
        }
    }

    /// Rebuilds the parameter set without range checks.
    pub(crate) fn into_model_unchecked(self) -> Result<SmnarxModel, ModelError> {
        let n = self.basis.len();
        let s = self.modes;
        if self.theta.len() != s || self.transition.len() != s {
            return Err(ModelError::Shape(format!(
                "expected {s} coefficient rows and transition rows"
            )));
        }
        let mut theta = Array2::zeros((s, n));
        for (m, row) in self.theta.iter().enumerate() {
            for tv in row {
                if tv.index >= n {
                    return Err(ModelError::TermIndex { index: tv.index, n });
                }
                theta[[m, tv.index]] = tv.value;
            }
        }
        let mut transition = Array2::zeros((s, s));
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != s {
                return Err(ModelError::Shape("transition row length".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                transition[[i, j]] = v;
            }
        }
        Ok(SmnarxModel {
            basis: self.basis,
            theta,
            sigma2: self.sigma2,
            transition,
            initial: self.initial,
        })
    }
}

impl Serialize for SmnarxModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ModelRepr::from_model(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SmnarxModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let m = ModelRepr::deserialize(d)?
            .into_model_unchecked()
            .map_err(D::Error::custom)?;
        m.validate_with(STOCHASTIC_TOL, VARIANCE_FLOOR)
            .map_err(D::Error::custom)?;
        Ok(m)
    }
}
