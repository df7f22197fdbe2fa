//! Mode inference: Gaussian emissions, scaled forward-backward recursions,
//! state and pairwise posteriors, causal predictive mode probabilities and
//! one-step-ahead predictions.
//!
//! The recursions are normalized at every step. With `c_k` the normalizer
//! of the forward update, the scaled forward variable sums to one, the
//! backward variable is divided by the same `c_{k+1}`, the state posterior
//! is the plain product `alpha_hat * beta_hat` and the sequence
//! log-likelihood is `sum_k ln c_k`.
//!
//! Emissions are handled in the log domain: each row is shifted by its
//! maximum before exponentiation and the shift is added back to `ln c_k`,
//! so extreme residuals do not wipe out the relative mode evidence.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{DesignMatrix, SegmentView};
use crate::model::SmnarxModel;

/// Lower bound applied to emission densities.
pub const EMISSION_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("empty segment")]
    EmptySegment,
    #[error("degenerate emissions at row {row}: no mode has positive likelihood")]
    DegenerateEmissions { row: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Gaussian density of `y` under each mode's predictor.
pub fn emission_probs(model: &SmnarxModel, phi: ArrayView1<f64>, y: f64) -> Vec<f64> {
    let norm = 1.0 / (2.0 * PI * model.sigma2).sqrt();
    model
        .theta
        .rows()
        .into_iter()
        .map(|theta| {
            let r = y - theta.dot(&phi);
            (norm * (-0.5 * r * r / model.sigma2).exp()).max(EMISSION_FLOOR)
        })
        .collect()
}

/// Posterior quantities for one segment.
#[derive(Debug, Clone)]
pub struct SegmentPosterior {
    pub alpha_hat: Array2<f64>,
    pub beta_hat: Array2<f64>,
    /// `ln c_k` for every row.
    pub log_scale: Vec<f64>,
    pub gamma: Array2<f64>,
    /// `(N-1) x S x S`, `xi[[k, i, j]] = p(z_k = i, z_{k+1} = j | Y)`.
    pub xi: Array3<f64>,
    pub loglik: f64,
}

impl SegmentPosterior {
    pub fn len(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.nrows() == 0
    }

    /// `sum_k xi_k`, the expected transition counts.
    pub fn transition_counts(&self) -> Array2<f64> {
        let s = self.gamma.ncols();
        let mut acc = Array2::zeros((s, s));
        for k in 0..self.xi.shape()[0] {
            acc += &self.xi.index_axis(ndarray::Axis(0), k);
        }
        acc
    }

    /// Most probable mode per row.
    pub fn map_modes(&self) -> Vec<usize> {
        self.gamma.rows().into_iter().map(argmax).collect()
    }
}

/// Posteriors for every segment of a design matrix.
#[derive(Debug, Clone)]
pub struct PosteriorSet {
    pub segments: Vec<SegmentPosterior>,
    pub loglik: f64,
}

impl PosteriorSet {
    /// State posteriors stacked in design-matrix row order.
    pub fn stacked_gamma(&self) -> Array2<f64> {
        let views: Vec<ArrayView2<f64>> = self.segments.iter().map(|p| p.gamma.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("equal mode counts")
    }
}

pub(crate) fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shifted emissions `exp(ln b - m_k)` and the per-row shifts `m_k`.
fn shifted_emissions(
    model: &SmnarxModel,
    means: ArrayView2<f64>,
    targets: &[f64],
) -> (Array2<f64>, Vec<f64>) {
    let (n, s) = means.dim();
    let log_norm = -0.5 * (2.0 * PI * model.sigma2).ln();
    let inv2v = 0.5 / model.sigma2;
    let mut b = Array2::zeros((n, s));
    let mut shift = Vec::with_capacity(n);
    for k in 0..n {
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..s {
            let r = targets[k] - means[[k, j]];
            let lb = log_norm - inv2v * r * r;
            b[[k, j]] = lb;
            row_max = row_max.max(lb);
        }
        for j in 0..s {
            b[[k, j]] = (b[[k, j]] - row_max).exp().max(EMISSION_FLOOR);
        }
        shift.push(row_max);
    }
    (b, shift)
}

/// Scaled forward-backward on one segment given the per-mode means.
pub fn forward_backward_means(
    model: &SmnarxModel,
    means: ArrayView2<f64>,
    targets: &[f64],
) -> Result<SegmentPosterior, InferenceError> {
    let (n, s) = means.dim();
    if targets.len() != n || s != model.modes() {
        return Err(InferenceError::Dimension(format!(
            "{n} rows / {} targets / {s} modes",
            targets.len()
        )));
    }
    let (b, shift) = shifted_emissions(model, means, targets);
    forward_backward_emissions(&model.initial, &model.transition, b.view(), Some(&shift))
}

/// Scaled forward-backward from emission probabilities.
///
/// Row `k` of `emissions` may carry an arbitrary positive factor
/// `exp(-log_shift[k])`; the shifts are added back into the log-likelihood.
pub fn forward_backward_emissions(
    initial: &[f64],
    a: &Array2<f64>,
    b: ArrayView2<f64>,
    log_shift: Option<&[f64]>,
) -> Result<SegmentPosterior, InferenceError> {
    let (n, s) = b.dim();
    if n == 0 {
        return Err(InferenceError::EmptySegment);
    }
    if initial.len() != s || a.dim() != (s, s) || log_shift.is_some_and(|l| l.len() != n) {
        return Err(InferenceError::Dimension(format!(
            "emissions {n}x{s} do not match the chain parameters"
        )));
    }
    let mut alpha = Array2::zeros((n, s));
    let mut c = vec![0.0; n];
    for k in 0..n {
        let mut total = 0.0;
        for j in 0..s {
            let prior = if k == 0 {
                initial[j]
            } else {
                (0..s).map(|i| alpha[[k - 1, i]] * a[[i, j]]).sum()
            };
            let v = prior * b[[k, j]];
            alpha[[k, j]] = v;
            total += v;
        }
        if !(total.is_finite() && total > 0.0) {
            return Err(InferenceError::DegenerateEmissions { row: k });
        }
        for j in 0..s {
            alpha[[k, j]] /= total;
        }
        c[k] = total;
    }

    let mut beta = Array2::zeros((n, s));
    beta.row_mut(n - 1).fill(1.0);
    for k in (0..n - 1).rev() {
        for i in 0..s {
            let v: f64 = (0..s)
                .map(|j| a[[i, j]] * b[[k + 1, j]] * beta[[k + 1, j]])
                .sum();
            beta[[k, i]] = v / c[k + 1];
        }
    }

    let gamma = &alpha * &beta;
    let mut xi = Array3::zeros((n.saturating_sub(1), s, s));
    for k in 0..n.saturating_sub(1) {
        for i in 0..s {
            for j in 0..s {
                xi[[k, i, j]] =
                    alpha[[k, i]] * a[[i, j]] * b[[k + 1, j]] * beta[[k + 1, j]] / c[k + 1];
            }
        }
    }
    let log_scale: Vec<f64> = match log_shift {
        Some(shift) => c.iter().zip(shift).map(|(c, m)| c.ln() + m).collect(),
        None => c.iter().map(|c| c.ln()).collect(),
    };
    let loglik = log_scale.iter().sum();
    Ok(SegmentPosterior {
        alpha_hat: alpha,
        beta_hat: beta,
        log_scale,
        gamma,
        xi,
        loglik,
    })
}

/// Scaled forward-backward on one segment.
pub fn forward_backward(
    model: &SmnarxModel,
    segment: SegmentView<'_>,
) -> Result<SegmentPosterior, InferenceError> {
    check_columns(model, segment.phi)?;
    let means = model.mode_means(segment.phi);
    forward_backward_means(model, means.view(), segment.targets)
}

fn check_columns(model: &SmnarxModel, phi: ArrayView2<f64>) -> Result<(), InferenceError> {
    if phi.ncols() != model.basis.len() {
        return Err(InferenceError::Dimension(format!(
            "design has {} columns, model basis has {}",
            phi.ncols(),
            model.basis.len()
        )));
    }
    Ok(())
}

/// E-step over every segment of `design`, given precomputed `rows x S` means.
pub fn e_step_means(
    model: &SmnarxModel,
    design: &DesignMatrix,
    means: ArrayView2<f64>,
) -> Result<PosteriorSet, InferenceError> {
    let segments = design
        .segment_rows
        .par_iter()
        .map(|r| {
            forward_backward_means(
                model,
                means.slice(ndarray::s![r.clone(), ..]),
                &design.targets[r.clone()],
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let loglik = segments.iter().map(|p| p.loglik).sum();
    Ok(PosteriorSet { segments, loglik })
}

/// E-step over every segment of `design`.
pub fn e_step(model: &SmnarxModel, design: &DesignMatrix) -> Result<PosteriorSet, InferenceError> {
    check_columns(model, design.phi.view())?;
    let means = model.mode_means(design.phi.view());
    e_step_means(model, design, means.view())
}

/// `f_k^j = sum_i alpha_hat_{k-1}^i a^{i,j}`, normalized.
pub fn predictive_mode_probs(transition: &Array2<f64>, alpha_prev: ArrayView1<f64>) -> Vec<f64> {
    let f = alpha_prev.dot(transition);
    let total: f64 = f.sum();
    f.iter().map(|v| v / total).collect()
}

/// `y_hat_k = sum_s f_k^s theta_s^T phi_k`.
pub fn predict_one_step(model: &SmnarxModel, f: &[f64], phi: ArrayView1<f64>) -> f64 {
    model
        .theta
        .rows()
        .into_iter()
        .zip(f)
        .map(|(theta, w)| w * theta.dot(&phi))
        .sum()
}

/// Causal pass over a segment.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// `p(z_k | y_1..y_{k-1})`, one row per sample.
    pub f: Array2<f64>,
    pub yhat: Vec<f64>,
    pub modes: Vec<usize>,
}

/// Runs the scaled forward recursion causally: `f_k` and `y_hat_k` are
/// produced before `y_k` is absorbed. The first row uses the initial
/// distribution.
pub fn filter_sequence(
    model: &SmnarxModel,
    segment: SegmentView<'_>,
) -> Result<FilterOutput, InferenceError> {
    check_columns(model, segment.phi)?;
    let n = segment.targets.len();
    if n == 0 {
        return Err(InferenceError::EmptySegment);
    }
    let s = model.modes();
    let means = model.mode_means(segment.phi);
    let (b, _) = shifted_emissions(model, means.view(), segment.targets);
    let mut f = Array2::zeros((n, s));
    let mut yhat = Vec::with_capacity(n);
    let mut modes = Vec::with_capacity(n);
    let mut alpha = ndarray::Array1::from(model.initial.clone());
    for k in 0..n {
        let fk = if k == 0 {
            model.initial.clone()
        } else {
            predictive_mode_probs(&model.transition, alpha.view())
        };
        yhat.push(fk.iter().zip(means.row(k)).map(|(w, m)| w * m).sum());
        modes.push(argmax(ArrayView1::from(&fk)));
        let mut total = 0.0;
        for j in 0..s {
            alpha[j] = fk[j] * b[[k, j]];
            total += alpha[j];
        }
        if !(total.is_finite() && total > 0.0) {
            return Err(InferenceError::DegenerateEmissions { row: k });
        }
        alpha /= total;
        f.row_mut(k).assign(&ArrayView1::from(&fk));
    }
    Ok(FilterOutput { f, yhat, modes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{enumerate_basis, BasisConfig};
    use ndarray::array;

    /// Two-mode model whose emissions can be set directly through the
    /// targets: mode means are 0 and 1 via a constant-only design.
    fn const_model(s: usize, a: Array2<f64>, pi: Vec<f64>, sigma2: f64) -> SmnarxModel {
        let basis = enumerate_basis(BasisConfig::new(1, 1, 1, 1).unwrap());
        let mut theta = Array2::zeros((s, basis.len()));
        for m in 0..s {
            theta[[m, 0]] = m as f64;
        }
        SmnarxModel::new(basis, theta, sigma2, a, pi).unwrap()
    }

    #[test]
    fn emission_peak_value() {
        let m = const_model(2, array![[0.5, 0.5], [0.5, 0.5]], vec![0.5, 0.5], 0.01);
        let phi = array![1.0, 0.0, 0.0];
        let b = emission_probs(&m, phi.view(), 1.0);
        assert!((b[1] - 1.0 / ((2.0 * PI).sqrt() * 0.1)).abs() < 1e-12);
        assert!((b[1] - 3.9894).abs() < 1e-4);
        let far = emission_probs(&m, phi.view(), 1e3);
        assert_eq!(far, vec![EMISSION_FLOOR, EMISSION_FLOOR]);
    }

    #[test]
    fn identical_modes_identical_emissions() {
        let mut m = const_model(2, array![[0.5, 0.5], [0.5, 0.5]], vec![0.5, 0.5], 0.3);
        m.theta[[1, 0]] = 0.0;
        let b = emission_probs(&m, array![1.0, 0.2, 0.3].view(), 0.7);
        assert_eq!(b[0], b[1]);
    }

    fn toy_posterior() -> SegmentPosterior {
        let a = array![[0.9, 0.1], [0.2, 0.8]];
        let b = array![[0.8, 0.3], [0.4, 0.6]];
        forward_backward_emissions(&[0.5, 0.5], &a, b.view(), None).unwrap()
    }

    #[test]
    fn toy_matches_path_enumeration() {
        let post = toy_posterior();
        // the four paths contribute 0.144, 0.024, 0.012, 0.072
        assert!((post.loglik - 0.252f64.ln()).abs() < 1e-14);
        assert!((post.gamma[[0, 0]] - 2.0 / 3.0).abs() < 1e-12);
        assert!((post.gamma[[0, 1]] - 1.0 / 3.0).abs() < 1e-12);
        assert!((post.alpha_hat[[1, 0]] - 0.156 / 0.252).abs() < 1e-12);
        assert!((post.alpha_hat[[1, 1]] - 0.096 / 0.252).abs() < 1e-12);
        assert!((post.xi[[0, 0, 0]] - 0.144 / 0.252).abs() < 1e-12);
    }

    #[test]
    fn log_shift_is_added_back() {
        let a = array![[0.9, 0.1], [0.2, 0.8]];
        let b = array![[0.8, 0.3], [0.4, 0.6]];
        let shifted = b.map(|v| v * 1e5);
        let shift = [-(1e5f64.ln()), -(1e5f64.ln())];
        let p = forward_backward_emissions(&[0.5, 0.5], &a, shifted.view(), Some(&shift)).unwrap();
        assert!((p.loglik - 0.252f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_sample_segment() {
        let m = const_model(2, array![[0.9, 0.1], [0.2, 0.8]], vec![0.3, 0.7], 0.5);
        let phi = array![[1.0, 0.0, 0.0]];
        let y = [0.4];
        let post = forward_backward(
            &m,
            SegmentView {
                phi: phi.view(),
                targets: &y,
            },
        )
        .unwrap();
        let b = emission_probs(&m, phi.row(0), y[0]);
        let z = 0.3 * b[0] + 0.7 * b[1];
        assert!((post.gamma[[0, 0]] - 0.3 * b[0] / z).abs() < 1e-12);
        assert!((post.loglik - z.ln()).abs() < 1e-12);
        assert_eq!(post.xi.shape(), &[0, 2, 2]);
    }

    #[test]
    fn predictive_probabilities() {
        let eye = Array2::eye(3);
        let alpha = array![0.2, 0.5, 0.3];
        assert_eq!(predictive_mode_probs(&eye, alpha.view()), vec![0.2, 0.5, 0.3]);

        let a = array![[0.98, 0.02, 0.0], [0.0, 0.98, 0.02], [0.02, 0.0, 0.98]];
        let f = predictive_mode_probs(&a, array![1.0, 0.0, 0.0].view());
        assert_eq!(f, vec![0.98, 0.02, 0.0]);
        let f = predictive_mode_probs(&a, array![1.0, 1.0, 1.0].view().map(|v| v / 3.0).view());
        for v in f {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn prediction_mixes_means() {
        let mut m = const_model(2, array![[0.5, 0.5], [0.5, 0.5]], vec![0.5, 0.5], 0.1);
        let phi = array![1.0, 2.0, 3.0];
        assert_eq!(predict_one_step(&m, &[0.0, 1.0], phi.view()), 1.0);
        assert_eq!(predict_one_step(&m, &[1.0, 0.0], phi.view()), 0.0);
        m.theta.row_mut(1).assign(&array![0.5, -1.0, 2.0]);
        m.theta.row_mut(0).assign(&array![0.5, -1.0, 2.0]);
        let want = 0.5 - 2.0 + 6.0;
        assert!((predict_one_step(&m, &[0.3, 0.7], phi.view()) - want).abs() < 1e-14);
    }

    #[test]
    fn filter_tracks_sticky_modes() {
        // self-transitions only, tiny noise: after the first sample the
        // predictive probability sits on the true mode.
        let m = const_model(2, Array2::eye(2), vec![0.5, 0.5], 1e-6);
        let phi = Array2::from_shape_fn((20, 3), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let y = vec![1.0; 20];
        let out = filter_sequence(
            &m,
            SegmentView {
                phi: phi.view(),
                targets: &y,
            },
        )
        .unwrap();
        assert!(out.modes[1..].iter().all(|&z| z == 1));
        assert!((out.yhat[5] - 1.0).abs() < 1e-12);

        let empty = Array2::zeros((0, 3));
        assert_eq!(
            filter_sequence(
                &m,
                SegmentView {
                    phi: empty.view(),
                    targets: &[],
                }
            )
            .unwrap_err(),
            InferenceError::EmptySegment
        );
    }
}
