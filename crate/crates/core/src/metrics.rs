//! Evaluation against held-out data and, when available, the true system.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, DesignMatrix};
use crate::dataset::{Split, TrajectoryDataset};
use crate::inference::{argmax, e_step, filter_sequence, InferenceError};
use crate::model::SmnarxModel;

/// Largest mode count for exhaustive mode matching.
pub const MAX_MATCH_MODES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mode count mismatch: estimate has {estimated}, truth has {truth}")]
    ModeCount { estimated: usize, truth: usize },
    #[error("estimate and truth use different bases")]
    BasisMismatch,
    #[error("exhaustive matching supports at most {MAX_MATCH_MODES} modes, got {0}")]
    TooManyModes(usize),
    #[error("true mode {0} has an all-zero coefficient vector")]
    ZeroTrueMode(usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("cannot compute a metric on zero samples")]
    Empty,
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// Every permutation of `0..s` in lexicographic order.
pub fn permutations(s: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(s), &mut vec![false; s], &mut out);
    out
}

fn distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Assignment of estimated modes to true modes minimizing the summed
/// Euclidean distance between coefficient vectors.
///
/// `perm[i]` is the estimated mode matched to true mode `i`, so
/// `estimated.permuted(&perm)` lines up with `truth`.
pub fn match_modes(estimated: &SmnarxModel, truth: &SmnarxModel) -> Result<Vec<usize>, MetricsError> {
    let s = truth.modes();
    if estimated.modes() != s {
        return Err(MetricsError::ModeCount {
            estimated: estimated.modes(),
            truth: s,
        });
    }
    if estimated.basis.terms() != truth.basis.terms() {
        return Err(MetricsError::BasisMismatch);
    }
    if s > MAX_MATCH_MODES {
        return Err(MetricsError::TooManyModes(s));
    }
    let mut cost = Array2::zeros((s, s));
    for i in 0..s {
        for j in 0..s {
            cost[[i, j]] = distance(truth.theta.row(i), estimated.theta.row(j));
        }
    }
    let mut best = (f64::INFINITY, (0..s).collect::<Vec<_>>());
    for p in permutations(s) {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if c < best.0 {
            best = (c, p);
        }
    }
    Ok(best.1)
}

/// `(1/S) sum_s (1 - |theta_s - theta_hat_s| / |theta_s|)`.
pub fn f_theta(estimated: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<f64, MetricsError> {
    if estimated.dim() != truth.dim() {
        return Err(MetricsError::Length(estimated.len(), truth.len()));
    }
    let s = truth.nrows();
    let mut total = 0.0;
    for i in 0..s {
        let norm = truth.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(MetricsError::ZeroTrueMode(i));
        }
        total += 1.0 - distance(truth.row(i), estimated.row(i)) / norm;
    }
    Ok(total / s as f64)
}

/// `1 - |A_hat - A|_F / |A|_F`.
pub fn f_a(estimated: ArrayView2<f64>, truth: ArrayView2<f64>) -> f64 {
    let diff: f64 = estimated
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let norm: f64 = truth.iter().map(|v| v * v).sum();
    1.0 - (diff / norm).sqrt()
}

/// Fraction of positions where the two label sequences agree.
pub fn f_s(inferred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    if inferred.len() != truth.len() {
        return Err(MetricsError::Length(inferred.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = inferred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn rmse(yhat: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if yhat.len() != y.len() {
        return Err(MetricsError::Length(yhat.len(), y.len()));
    }
    if y.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sse: f64 = yhat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// One-step-ahead predictions over every segment of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPrediction {
    pub yhat: Vec<f64>,
    pub y: Vec<f64>,
    /// Estimated mode labels, `argmax f_k`.
    pub modes: Vec<usize>,
    /// Ground-truth labels when the dataset carries them.
    pub true_modes: Option<Vec<usize>>,
    /// 0-based global sample index of every row.
    pub index: Vec<usize>,
}

fn true_labels(dataset: &TrajectoryDataset, design: &DesignMatrix) -> Option<Vec<usize>> {
    design
        .sources
        .iter()
        .map(|r| {
            dataset.segments[r.segment]
                .modes
                .as_ref()
                .map(|m| m[r.sample])
        })
        .collect()
}

fn global_index(dataset: &TrajectoryDataset, design: &DesignMatrix) -> Vec<usize> {
    design
        .sources
        .iter()
        .map(|r| dataset.segments[r.segment].start + r.sample)
        .collect()
}

/// Causal predictions on every segment of `split`, each started from the
/// initial distribution. Returns `None` when the split is empty.
pub fn predict_split(
    model: &SmnarxModel,
    dataset: &TrajectoryDataset,
    split: Split,
) -> Result<Option<SplitPrediction>, MetricsError> {
    if dataset.segments_in(split).next().is_none() {
        return Ok(None);
    }
    let design = DesignMatrix::build_filtered(&model.basis, dataset, |s| s.split == split)?;
    let mut out = SplitPrediction {
        yhat: Vec::with_capacity(design.rows()),
        y: design.targets.clone(),
        modes: Vec::with_capacity(design.rows()),
        true_modes: true_labels(dataset, &design),
        index: global_index(dataset, &design),
    };
    for view in design.segments() {
        let f = filter_sequence(model, view)?;
        out.yhat.extend(f.yhat);
        out.modes.extend(f.modes);
    }
    Ok(Some(out))
}

/// Smoothed mode labels `argmax gamma_k` on the training rows.
pub fn smoothed_modes(
    model: &SmnarxModel,
    dataset: &TrajectoryDataset,
    split: Split,
) -> Result<Option<SplitPrediction>, MetricsError> {
    if dataset.segments_in(split).next().is_none() {
        return Ok(None);
    }
    let design = DesignMatrix::build_filtered(&model.basis, dataset, |s| s.split == split)?;
    let post = e_step(model, &design)?;
    let means = model.mode_means(design.phi.view());
    let mut yhat = Vec::with_capacity(design.rows());
    let mut modes = Vec::with_capacity(design.rows());
    let gamma = post.stacked_gamma();
    for (g, m) in gamma.rows().into_iter().zip(means.rows()) {
        yhat.push(g.dot(&m));
        modes.push(argmax(g));
    }
    Ok(Some(SplitPrediction {
        yhat,
        y: design.targets.clone(),
        modes,
        true_modes: true_labels(dataset, &design),
        index: global_index(dataset, &design),
    }))
}

/// One line of the mode trace: `(k, split, true mode, predicted mode)`,
/// modes 0-based in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeTraceRow {
    pub k: usize,
    pub split: Split,
    pub true_mode: Option<usize>,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse_test: Option<f64>,
    pub rmse_validation: Option<f64>,
    pub f_theta: Option<f64>,
    pub f_a: Option<f64>,
    pub f_s_train: Option<f64>,
    pub f_s_test: Option<f64>,
    /// Nonzero coefficients per mode (after matching, when a truth is given).
    pub n_feat: Vec<usize>,
    /// Terms available to every mode.
    pub n_available: usize,
    /// `permutation[i]` = estimated mode matched to true mode `i`.
    pub permutation: Option<Vec<usize>>,
    /// Per-mode supports equal the true supports.
    pub support_exact: Option<bool>,
    pub sigma2: f64,
}

/// Evaluation plus the mode trace over the training and test splits.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvaluationReport,
    /// The evaluated model, reordered to the truth when one is given.
    pub model: SmnarxModel,
    pub trace: Vec<ModeTraceRow>,
}

/// Evaluates `model` on `dataset`. Parameter indexes are computed only when
/// `truth` is given; mode accuracies need both a truth and mode labels in
/// the dataset.
pub fn evaluate(
    model: &SmnarxModel,
    dataset: &TrajectoryDataset,
    truth: Option<&SmnarxModel>,
) -> Result<Evaluation, MetricsError> {
    let (model, permutation) = match truth {
        Some(t) => {
            let perm = match_modes(model, t)?;
            (model.permuted(&perm), Some(perm))
        }
        None => (model.clone(), None),
    };
    let test = predict_split(&model, dataset, Split::Test)?;
    let validation = predict_split(&model, dataset, Split::Validation)?;
    let train = smoothed_modes(&model, dataset, Split::Train)?;

    let rmse_of = |p: &Option<SplitPrediction>| p.as_ref().map(|p| rmse(&p.yhat, &p.y)).transpose();
    let accuracy = |p: &Option<SplitPrediction>| -> Result<Option<f64>, MetricsError> {
        match (truth, p) {
            (Some(_), Some(SplitPrediction {
                modes,
                true_modes: Some(z),
                ..
            })) => f_s(modes, z).map(Some),
            _ => Ok(None),
        }
    };

    let (f_theta_v, f_a_v, support_exact) = match truth {
        Some(t) => (
            Some(f_theta(model.theta.view(), t.theta.view())?),
            Some(f_a(model.transition.view(), t.transition.view())),
            Some(model.supports() == t.supports()),
        ),
        None => (None, None, None),
    };

    let mut trace = Vec::new();
    for (split, pred) in [(Split::Train, &train), (Split::Test, &test)] {
        if let Some(p) = pred {
            for (i, (&k, &m)) in p.index.iter().zip(&p.modes).enumerate() {
                trace.push(ModeTraceRow {
                    k,
                    split,
                    true_mode: p.true_modes.as_ref().map(|z| z[i]),
                    predicted: m,
                });
            }
        }
    }

    let report = EvaluationReport {
        rmse_test: rmse_of(&test)?,
        rmse_validation: rmse_of(&validation)?,
        f_theta: f_theta_v,
        f_a: f_a_v,
        f_s_train: accuracy(&train)?,
        f_s_test: accuracy(&test)?,
        n_feat: model.supports().iter().map(Vec::len).collect(),
        n_available: model.basis.len(),
        permutation,
        support_exact,
        sigma2: model.sigma2,
    };
    Ok(Evaluation {
        report,
        model,
        trace,
    })
}

/// Writes the mode trace as `k,split,true_mode,predicted_mode` with 1-based
/// `k` and modes; the true mode is left empty when unknown.
pub fn write_mode_trace<W: std::io::Write>(rows: &[ModeTraceRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["k", "split", "true_mode", "predicted_mode"])?;
    for r in rows {
        out.write_record([
            (r.k + 1).to_string(),
            r.split.to_string(),
            r.true_mode.map(|z| (z + 1).to_string()).unwrap_or_default(),
            (r.predicted + 1).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
