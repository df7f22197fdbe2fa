//! Expectation maximization for switched Markov polynomial NARX models.
//!
//! Each iteration runs forward-backward on every training segment, then
//! updates, in order, the per-mode coefficients (weighted ℓ1 regressions),
//! the shared noise variance, and the transition matrix and initial
//! distribution. The two-stage variant starts with a burn-in phase using
//! only the ℓ1 penalty; once the log-likelihood improvement drops below
//! `burn_in_tol` every coefficient update is followed by hard thresholding
//! and later solves are restricted to the surviving support.
//!
//! `lambda` is expressed per sample of an average mode: with `N` training
//! rows and `S` modes, the regression for mode `s` minimizes
//!
//! ```text
//! sum_k gamma_k^s r_k^2 + 2 lambda (N / S) |theta_s|_1
//! ```
//!
//! so that for balanced modes it matches the mean-loss convention
//! `sum_k gamma_k^s r_k^2 / (2 N_s) + lambda |theta_s|_1`. The raw penalty
//! is constant over a run, which makes
//! `loglik - 2 lambda (N / S) sum_s |theta_s|_1 / (2 sigma^2)` the penalized
//! objective tracked in the fit report.

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisConfig, BasisError, DesignMatrix, PolynomialBasis};
use crate::dataset::{Split, TrajectoryDataset};
use crate::gram::{weighted_systems, MomentMap};
use crate::inference::{e_step_means, InferenceError, PosteriorSet};
use crate::model::{SmnarxModel, VARIANCE_FLOOR};
use crate::seeds::{stream_rng, Stream};
use crate::solver::{hard_threshold, solve_gram_lasso, support_of, SolverError, SolverSettings};

#[derive(Debug, Error, PartialEq)]
pub enum EmError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("dataset has no training segments")]
    NoTrainingData,
    #[error("dataset has no validation segments")]
    NoValidationData,
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("mode {mode} starved at iteration {iteration}: posterior mass {mass:.3e}")]
    ModeStarvation {
        mode: usize,
        iteration: usize,
        mass: f64,
    },
    #[error("all {restarts} restarts failed: {diagnostics:?}")]
    AllRestartsFailed {
        restarts: usize,
        diagnostics: Vec<String>,
    },
    #[error("empty lambda grid")]
    EmptyGrid,
}

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain EM, no penalty.
    Em,
    /// ℓ1-penalized M-step.
    EmL1,
    /// ℓ1 burn-in followed by hard thresholding.
    EmL1TwoStage,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Em => "em",
            Variant::EmL1 => "em-l1",
            Variant::EmL1TwoStage => "em-l1-2s",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub modes: usize,
    pub variant: Variant,
    pub lambda: f64,
    pub upsilon: f64,
    pub burn_in_tol: f64,
    pub converge_tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub gamma_init_range: (f64, f64),
    pub var_floor: f64,
    pub seed: u64,
    pub coord_tol: f64,
    pub max_sweeps: usize,
    /// Keep the coefficient matrix of every iteration in the report.
    #[serde(default)]
    pub record_paths: bool,
    /// Optional per-mode supports fixed from the start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_sets: Option<Vec<Vec<usize>>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            modes: 3,
            variant: Variant::EmL1TwoStage,
            lambda: 5e-4,
            upsilon: 5e-2,
            burn_in_tol: 1e-2,
            converge_tol: 1e-6,
            max_iters: 100,
            restarts: 10,
            gamma_init_range: (0.31, 0.35),
            var_floor: VARIANCE_FLOOR,
            seed: 0,
            coord_tol: 1e-8,
            max_sweeps: 1000,
            record_paths: false,
            active_sets: None,
        }
    }
}

/// Fraction of the row count below which a mode's posterior mass counts as
/// starved.
const STARVATION_FRACTION: f64 = 1e-6;

impl FitConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        let bad = |m: &str| Err(EmError::Config(m.to_string()));
        if self.modes == 0 {
            return bad("modes must be >= 1");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.upsilon.is_finite() && self.upsilon >= 0.0) {
            return bad("upsilon must be finite and >= 0");
        }
        if !(self.converge_tol > 0.0 && self.converge_tol <= self.burn_in_tol) {
            return bad("need 0 < converge_tol <= burn_in_tol");
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1");
        }
        let (lo, hi) = self.gamma_init_range;
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return bad("gamma_init_range must satisfy 0 <= low < high");
        }
        if !(self.var_floor > 0.0) {
            return bad("var_floor must be positive");
        }
        if !(self.coord_tol > 0.0) || self.max_sweeps == 0 {
            return bad("solver tolerances must be positive");
        }
        if let Some(sets) = &self.active_sets {
            if sets.len() != self.modes {
                return bad("active_sets needs one entry per mode");
            }
        }
        Ok(())
    }

    /// Penalty weight actually applied (zero for plain EM).
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::Em => 0.0,
            _ => self.lambda,
        }
    }

    pub fn thresholding(&self) -> bool {
        self.variant == Variant::EmL1TwoStage
    }

    /// Penalty weight handed to the solver for `rows` training rows.
    pub fn raw_penalty(&self, rows: usize) -> f64 {
        2.0 * self.effective_lambda() * rows as f64 / self.modes as f64
    }

    fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            coord_tol: self.coord_tol,
            max_sweeps: self.max_sweeps,
            warm_start: None,
            track_objective: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    BurnIn,
    Threshold,
}

/// Training rows plus the precomputed moment map.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub basis: PolynomialBasis,
    pub design: DesignMatrix,
    pub moments: Option<MomentMap>,
}

impl TrainingSet {
    pub fn new(basis: PolynomialBasis, design: DesignMatrix) -> Self {
        let moments = MomentMap::new(&basis);
        // the moment path only pays off when it is smaller than the Gram triangle
        let n = basis.len();
        let moments = (moments.moment_count() < n * (n + 1) / 2).then_some(moments);
        TrainingSet {
            basis,
            design,
            moments,
        }
    }

    /// Training split of `dataset` (every segment when nothing is tagged).
    pub fn from_dataset(config: BasisConfig, dataset: &TrajectoryDataset) -> Result<Self, EmError> {
        let basis = PolynomialBasis::new(config);
        let split = if dataset.segments_in(Split::Train).next().is_some() {
            Some(Split::Train)
        } else if dataset.segments.iter().all(|s| s.split == Split::None) && !dataset.segments.is_empty() {
            None
        } else {
            return Err(EmError::NoTrainingData);
        };
        let design = DesignMatrix::build_filtered(&basis, dataset, |s| {
            split.is_none_or(|sp| s.split == sp)
        })?;
        Ok(TrainingSet::new(basis, design))
    }

    pub fn rows(&self) -> usize {
        self.design.rows()
    }
}

/// Coefficient, variance and transition updates given posteriors.
#[derive(Debug, Clone)]
pub struct MStepOutput {
    pub model: SmnarxModel,
    pub active: Vec<Option<Vec<usize>>>,
    /// Modes whose transition row was reset for lack of mass.
    pub starved_rows: Vec<usize>,
    /// Per-mode solver sweeps.
    pub sweeps: Vec<usize>,
    /// `rows x S` means of the new coefficients.
    pub means: Array2<f64>,
}

/// `gamma_k^s ~ U[lo, hi]` renormalized per row.
pub fn initial_responsibilities<R: Rng>(rows: usize, modes: usize, range: (f64, f64), rng: &mut R) -> Array2<f64> {
    let (lo, hi) = range;
    let mut g = Array2::zeros((rows, modes));
    for mut row in g.rows_mut() {
        for v in row.iter_mut() {
            *v = lo + (hi - lo) * rng.random::<f64>();
        }
        let total = row.sum();
        row /= total;
    }
    g
}

/// Transition matrix and initial distribution from pairwise posteriors.
///
/// Returns the indices of rows with no expected outgoing transitions, which
/// are reset to uniform.
pub fn m_step_transitions(posteriors: &PosteriorSet, modes: usize) -> (Array2<f64>, Vec<f64>, Vec<usize>) {
    let mut counts = Array2::zeros((modes, modes));
    let mut initial = vec![0.0; modes];
    for p in &posteriors.segments {
        counts += &p.transition_counts();
        for (acc, v) in initial.iter_mut().zip(p.gamma.row(0)) {
            *acc += v;
        }
    }
    let mut starved = Vec::new();
    for (i, mut row) in counts.rows_mut().into_iter().enumerate() {
        let total = row.sum();
        if total > 0.0 && total.is_finite() {
            row /= total;
            let again = row.sum();
            row /= again;
        } else {
            row.fill(1.0 / modes as f64);
            starved.push(i);
        }
    }
    if !starved.is_empty() {
        log::warn!("transition rows {starved:?} had no expected mass; reset to uniform");
    }
    let total: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|v| *v /= total);
    (counts, initial, starved)
}

/// `sigma^2 = sum_s sum_k gamma_k^s (y_k - mean_ks)^2 / sum_s sum_k gamma_k^s`,
/// floored at `var_floor`.
pub fn m_step_variance(gamma: &Array2<f64>, means: &Array2<f64>, targets: &[f64], var_floor: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, (g, m)) in gamma.rows().into_iter().zip(means.rows()).enumerate() {
        for (gs, ms) in g.iter().zip(m.iter()) {
            let r = targets[k] - ms;
            num += gs * r * r;
            den += gs;
        }
    }
    (num / den).max(var_floor)
}

/// Per-mode weighted ℓ1 regressions, followed by hard thresholding in the
/// threshold phase.
///
/// Returns the new coefficient matrix, the next active sets and the solver
/// sweep counts.
pub fn m_step_coefficients(
    train: &TrainingSet,
    gamma: &Array2<f64>,
    warm: &Array2<f64>,
    active: &[Option<Vec<usize>>],
    config: &FitConfig,
    phase: Phase,
) -> Result<(Array2<f64>, Vec<Option<Vec<usize>>>, Vec<usize>), EmError> {
    let s = gamma.ncols();
    let systems = weighted_systems(&train.design, train.moments.as_ref(), gamma.view(), active);
    let lambda = config.raw_penalty(train.rows());
    let results: Vec<Result<(Vec<f64>, usize), EmError>> = systems
        .par_iter()
        .enumerate()
        .map(|(m, sys)| {
            let mut settings = config.solver_settings();
            settings.warm_start = Some(warm.row(m).to_vec());
            let sol = solve_gram_lasso(sys, lambda, active[m].as_deref(), &settings)?;
            let theta = match phase {
                Phase::BurnIn => sol.coefficients,
                Phase::Threshold => hard_threshold(&sol.coefficients, config.upsilon),
            };
            Ok((theta, sol.sweeps))
        })
        .collect();
    let mut theta = Array2::zeros((s, train.basis.len()));
    let mut next_active = Vec::with_capacity(s);
    let mut sweeps = Vec::with_capacity(s);
    for (m, r) in results.into_iter().enumerate() {
        let (coef, sw) = r?;
        theta.row_mut(m).assign(&Array1::from(coef));
        next_active.push(match phase {
            Phase::BurnIn => active[m].clone(),
            Phase::Threshold => Some(support_of(theta.row(m).as_slice().expect("contiguous"))),
        });
        sweeps.push(sw);
    }
    Ok((theta, next_active, sweeps))
}

/// One full M-step: coefficients, then variance, then chain parameters.
pub fn m_step(
    train: &TrainingSet,
    posteriors: &PosteriorSet,
    current: &SmnarxModel,
    active: &[Option<Vec<usize>>],
    config: &FitConfig,
    phase: Phase,
) -> Result<MStepOutput, EmError> {
    let s = current.modes();
    let gamma = posteriors.stacked_gamma();
    let (theta, next_active, sweeps) =
        m_step_coefficients(train, &gamma, &current.theta, active, config, phase)?;
    let mut model = SmnarxModel {
        basis: train.basis.clone(),
        theta,
        sigma2: current.sigma2,
        transition: current.transition.clone(),
        initial: current.initial.clone(),
    };
    let means = model.mode_means(train.design.phi.view());
    model.sigma2 = m_step_variance(&gamma, &means, &train.design.targets, config.var_floor);
    let (transition, initial, starved_rows) = m_step_transitions(posteriors, s);
    model.transition = transition;
    model.initial = initial;
    Ok(MStepOutput {
        model,
        active: next_active,
        starved_rows,
        sweeps,
        means,
    })
}

/// Initial parameters: random responsibilities, uniform chain, and one
/// coefficient/variance update from those responsibilities.
pub fn initialize(
    train: &TrainingSet,
    config: &FitConfig,
    restart: usize,
) -> Result<(SmnarxModel, Array2<f64>, Vec<Option<Vec<usize>>>, Array2<f64>), EmError> {
    let s = config.modes;
    let mut rng = stream_rng(config.seed, Stream::Restart(restart));
    let gamma = initial_responsibilities(train.rows(), s, config.gamma_init_range, &mut rng);
    let active: Vec<Option<Vec<usize>>> = match &config.active_sets {
        Some(sets) => sets.iter().map(|a| Some(a.clone())).collect(),
        None => vec![None; s],
    };
    let warm = Array2::zeros((s, train.basis.len()));
    let (theta, active, _) =
        m_step_coefficients(train, &gamma, &warm, &active, config, Phase::BurnIn)?;
    let mut model = SmnarxModel {
        basis: train.basis.clone(),
        theta,
        sigma2: 1.0,
        transition: Array2::from_elem((s, s), 1.0 / s as f64),
        initial: vec![1.0 / s as f64; s],
    };
    let means = model.mode_means(train.design.phi.view());
    model.sigma2 = m_step_variance(&gamma, &means, &train.design.targets, config.var_floor);
    Ok((model, gamma, active, means))
}

/// Outcome of a single EM run from one initialization.
#[derive(Debug, Clone, Serialize)]
pub struct RestartOutcome {
    pub restart: usize,
    pub model: SmnarxModel,
    /// Log-likelihood of the parameters at each E-step.
    pub loglik_trace: Vec<f64>,
    /// Log-likelihood minus the ℓ1 penalty in log-likelihood units.
    pub penalized_trace: Vec<f64>,
    /// First E-step index evaluated in the threshold phase.
    pub phase_switch: Option<usize>,
    pub support_trace: Vec<Vec<usize>>,
    #[serde(skip)]
    pub coefficient_paths: Vec<Array2<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub final_loglik: f64,
}

/// `raw_penalty * sum |theta| / (2 sigma^2)`.
pub fn penalty(model: &SmnarxModel, raw_penalty: f64) -> f64 {
    raw_penalty * model.theta.iter().map(|v| v.abs()).sum::<f64>() / (2.0 * model.sigma2)
}

/// Runs EM from restart `restart`'s initialization.
pub fn fit_restart(train: &TrainingSet, config: &FitConfig, restart: usize) -> Result<RestartOutcome, EmError> {
    config.validate()?;
    let s = config.modes;
    let rows = train.rows();
    let (mut model, _, mut active, mut means) = initialize(train, config, restart)?;
    let raw_penalty = config.raw_penalty(rows);

    let mut phase = Phase::BurnIn;
    let mut phase_switch = None;
    let mut loglik_trace = Vec::new();
    let mut penalized_trace = Vec::new();
    let mut support_trace = Vec::new();
    let mut paths = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut support_changed = false;

    loop {
        let post = e_step_means(&model, &train.design, means.view())?;
        let t = loglik_trace.len();
        loglik_trace.push(post.loglik);
        penalized_trace.push(post.loglik - penalty(&model, raw_penalty));
        support_trace.push(model.supports().iter().map(Vec::len).collect());
        if config.record_paths {
            paths.push(model.theta.clone());
        }

        for m in 0..s {
            let mass: f64 = post.segments.iter().map(|p| p.gamma.column(m).sum()).sum();
            if mass < STARVATION_FRACTION * rows as f64 {
                return Err(EmError::ModeStarvation {
                    mode: m,
                    iteration: t,
                    mass,
                });
            }
        }

        if t > 0 {
            let delta = loglik_trace[t] - loglik_trace[t - 1];
            match phase {
                Phase::BurnIn if config.thresholding() => {
                    if delta < config.burn_in_tol {
                        phase = Phase::Threshold;
                        phase_switch = Some(t + 1);
                        log::debug!("restart {restart}: threshold phase from iteration {t}");
                    }
                }
                Phase::BurnIn => {
                    if delta < config.converge_tol {
                        converged = true;
                    }
                }
                Phase::Threshold => {
                    if delta.abs() < config.converge_tol && !support_changed {
                        converged = true;
                    }
                }
            }
        }
        if converged || iterations >= config.max_iters {
            break;
        }

        let before: Vec<usize> = active.iter().map(|a| a.as_ref().map_or(usize::MAX, Vec::len)).collect();
        let out = m_step(train, &post, &model, &active, config, phase)?;
        let after: Vec<usize> = out.active.iter().map(|a| a.as_ref().map_or(usize::MAX, Vec::len)).collect();
        support_changed = phase == Phase::Threshold && before != after;
        model = out.model;
        active = out.active;
        means = out.means;
        iterations += 1;
    }

    let final_loglik = *loglik_trace.last().expect("at least one E-step");
    Ok(RestartOutcome {
        restart,
        model,
        loglik_trace,
        penalized_trace,
        phase_switch,
        support_trace,
        coefficient_paths: paths,
        iterations,
        converged,
        final_loglik,
    })
}

/// Result of a multi-restart fit.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub model: SmnarxModel,
    pub variant: Variant,
    pub loglik_trace: Vec<f64>,
    pub penalized_trace: Vec<f64>,
    pub phase_switch_iteration: Option<usize>,
    pub support_sizes: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub restart_selected: usize,
    /// Final log-likelihood per restart, `None` for failed restarts.
    pub restart_logliks: Vec<Option<f64>>,
    pub restart_failures: Vec<String>,
    pub config: FitConfig,
    #[serde(skip)]
    pub coefficient_paths: Vec<Array2<f64>>,
}

impl FitReport {
    /// Coefficient paths as CSV rows `iteration,mode,term,value` (nonzero
    /// entries, modes 1-based).
    pub fn write_paths_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "mode", "term", "value"])?;
        for (it, theta) in self.coefficient_paths.iter().enumerate() {
            for ((m, i), &v) in theta.indexed_iter() {
                if v != 0.0 {
                    out.write_record([
                        it.to_string(),
                        (m + 1).to_string(),
                        i.to_string(),
                        crate::dataset::fmt_f64(v),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Fits on a prepared training set, keeping the restart with the highest
/// final log-likelihood.
pub fn fit_training_set(train: &TrainingSet, config: &FitConfig) -> Result<FitReport, EmError> {
    config.validate()?;
    let outcomes: Vec<Result<RestartOutcome, EmError>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| fit_restart(train, config, r))
        .collect();
    let mut best: Option<RestartOutcome> = None;
    let mut logliks = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                logliks.push(Some(o.final_loglik));
                if best.as_ref().is_none_or(|b| o.final_loglik > b.final_loglik) {
                    best = Some(o);
                }
            }
            Err(e) => {
                logliks.push(None);
                failures.push(format!("restart {r}: {e}"));
            }
        }
    }
    let Some(best) = best else {
        return Err(EmError::AllRestartsFailed {
            restarts: config.restarts,
            diagnostics: failures,
        });
    };
    Ok(FitReport {
        support_sizes: best.model.supports().iter().map(Vec::len).collect(),
        model: best.model,
        variant: config.variant,
        loglik_trace: best.loglik_trace,
        penalized_trace: best.penalized_trace,
        phase_switch_iteration: best.phase_switch,
        converged: best.converged,
        iterations: best.iterations,
        restart_selected: best.restart,
        restart_logliks: logliks,
        restart_failures: failures,
        config: config.clone(),
        coefficient_paths: best.coefficient_paths,
    })
}

/// Fits an SMNARX model to the training split of `dataset`.
pub fn fit(dataset: &TrajectoryDataset, basis: BasisConfig, config: &FitConfig) -> Result<FitReport, EmError> {
    config.validate()?;
    let train = TrainingSet::from_dataset(basis, dataset)?;
    fit_training_set(&train, config)
}
