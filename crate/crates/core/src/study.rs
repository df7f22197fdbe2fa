//! Repeated simulate → fit → evaluate runs against a known system.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{fmt_f64, split_dataset};
use crate::em::{fit, FitConfig};
use crate::metrics::{evaluate, EvaluationReport};
use crate::seeds::{derive_seed, Stream};
use crate::simulate::{simulate, SimError, TrueSystem};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("run count must be at least 1")]
    NoRuns,
    #[error("invalid study settings: {0}")]
    Settings(String),
    #[error("all {0} runs failed")]
    AllFailed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub batch_len: usize,
    pub seed: u64,
    /// Simulation draws per run before giving up on diverging trajectories.
    pub max_sim_attempts: usize,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            train: 10000,
            validation: 1000,
            test: 1000,
            batch_len: 200,
            seed: 0,
            max_sim_attempts: 20,
        }
    }
}

impl StudySettings {
    pub fn samples(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run: usize,
    /// Seed of the trajectory that was fitted.
    pub sim_seed: u64,
    /// Diverged trajectories discarded before `sim_seed`.
    pub rejected_trajectories: usize,
    pub fit_seed: u64,
    pub report: EvaluationReport,
    /// Estimated coefficients after matching to the truth, `S x n`.
    pub theta: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub final_loglik: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunFailure {
    pub run: usize,
    pub error: String,
}

/// Mean and spread of one quantity over the successful runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        assert!(n > 0, "summary of no values");
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Summary { mean, median, std }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientStat {
    pub mode: usize,
    pub term: usize,
    pub label: String,
    pub truth: f64,
    pub estimate: Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    /// One entry per nonzero coefficient of the true system.
    pub coefficients: Vec<CoefficientStat>,
    pub sigma2_truth: f64,
    pub sigma2: Summary,
    pub indexes: Vec<(String, Summary)>,
    pub support_recovery_rate: f64,
}

fn simulate_run(
    truth: &TrueSystem,
    settings: &StudySettings,
    run_seed: u64,
) -> Result<(crate::dataset::TrajectoryDataset, u64, usize), SimError> {
    let mut last = None;
    for attempt in 0..settings.max_sim_attempts {
        let seed = if attempt == 0 {
            run_seed
        } else {
            derive_seed(run_seed, Stream::SimulationRetry(attempt))
        };
        match simulate(truth, settings.samples(), seed) {
            Ok(d) => return Ok((d, seed, attempt)),
            Err(e @ SimError::Diverged { .. }) => {
                log::debug!("trajectory with seed {seed} diverged, redrawing");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn one_run(truth: &TrueSystem, config: &FitConfig, settings: &StudySettings, run: usize) -> Result<RunRecord, String> {
    let start = Instant::now();
    let run_seed = derive_seed(settings.seed, Stream::StudyRun(run));
    let (data, sim_seed, rejected) = simulate_run(truth, settings, run_seed).map_err(|e| e.to_string())?;
    let data = split_dataset(
        &data,
        settings.train,
        settings.validation,
        settings.test,
        settings.batch_len,
    )
    .map_err(|e| e.to_string())?;
    let cfg = FitConfig {
        seed: run_seed,
        ..config.clone()
    };
    let fitted = fit(&data, *truth.model.basis.config(), &cfg).map_err(|e| e.to_string())?;
    let eval = evaluate(&fitted.model, &data, Some(&truth.model)).map_err(|e| e.to_string())?;
    Ok(RunRecord {
        run,
        sim_seed,
        rejected_trajectories: rejected,
        fit_seed: run_seed,
        report: eval.report,
        theta: eval.model.theta.rows().into_iter().map(|r| r.to_vec()).collect(),
        iterations: fitted.iterations,
        converged: fitted.converged,
        final_loglik: *fitted.loglik_trace.last().expect("nonempty trace"),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs `n_runs` independent studies concurrently and aggregates the
/// successful ones.
pub fn run_study(
    truth: &TrueSystem,
    config: &FitConfig,
    n_runs: usize,
    settings: &StudySettings,
) -> Result<StudyReport, StudyError> {
    if n_runs == 0 {
        return Err(StudyError::NoRuns);
    }
    if settings.max_sim_attempts == 0 {
        return Err(StudyError::Settings("max_sim_attempts must be positive".into()));
    }
    config
        .validate()
        .map_err(|e| StudyError::Settings(e.to_string()))?;
    let results: Vec<Result<RunRecord, String>> = (0..n_runs)
        .into_par_iter()
        .map(|r| one_run(truth, config, settings, r))
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (run, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => runs.push(rec),
            Err(error) => {
                log::warn!("study run {run} failed: {error}");
                failures.push(RunFailure { run, error });
            }
        }
    }
    if runs.is_empty() {
        return Err(StudyError::AllFailed(n_runs));
    }
    Ok(aggregate(truth, runs, failures))
}

fn aggregate(truth: &TrueSystem, runs: Vec<RunRecord>, failures: Vec<RunFailure>) -> StudyReport {
    let model = &truth.model;
    let mut coefficients = Vec::new();
    for (s, support) in model.supports().iter().enumerate() {
        for &i in support {
            let values: Vec<f64> = runs.iter().map(|r| r.theta[s][i]).collect();
            coefficients.push(CoefficientStat {
                mode: s,
                term: i,
                label: model.basis.term_label(i),
                truth: model.theta[[s, i]],
                estimate: Summary::of(&values),
            });
        }
    }
    let sigma2 = Summary::of(&runs.iter().map(|r| r.report.sigma2).collect::<Vec<_>>());
    type Pick = fn(&EvaluationReport) -> Option<f64>;
    let picks: [(&str, Pick); 6] = [
        ("rmse_test", |r| r.rmse_test),
        ("rmse_validation", |r| r.rmse_validation),
        ("f_theta", |r| r.f_theta),
        ("f_a", |r| r.f_a),
        ("f_s_train", |r| r.f_s_train),
        ("f_s_test", |r| r.f_s_test),
    ];
    let mut indexes = Vec::new();
    for (name, pick) in picks {
        let values: Vec<f64> = runs.iter().filter_map(|r| pick(&r.report)).collect();
        if !values.is_empty() {
            indexes.push((name.to_string(), Summary::of(&values)));
        }
    }
    let modes = model.modes();
    for s in 0..modes {
        let values: Vec<f64> = runs.iter().map(|r| r.report.n_feat[s] as f64).collect();
        indexes.push((format!("n_feat_{}", s + 1), Summary::of(&values)));
    }
    let exact = runs
        .iter()
        .filter(|r| r.report.support_exact == Some(true))
        .count();
    StudyReport {
        support_recovery_rate: exact as f64 / runs.len() as f64,
        coefficients,
        sigma2_truth: model.sigma2,
        sigma2,
        indexes,
        runs,
        failures,
    }
}

impl StudyReport {
    /// Per-run CSV: one row per successful run.
    pub fn write_runs_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let modes = self.runs.first().map_or(0, |r| r.report.n_feat.len());
        let mut header: Vec<String> = [
            "run",
            "sim_seed",
            "rejected_trajectories",
            "rmse_test",
            "rmse_validation",
            "f_theta",
            "f_a",
            "f_s_train",
            "f_s_test",
            "sigma2",
            "support_exact",
            "iterations",
            "converged",
            "final_loglik",
        ]
        .map(String::from)
        .to_vec();
        header.extend((1..=modes).map(|s| format!("n_feat_{s}")));
        out.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.runs {
            let mut row = vec![
                r.run.to_string(),
                r.sim_seed.to_string(),
                r.rejected_trajectories.to_string(),
                opt(r.report.rmse_test),
                opt(r.report.rmse_validation),
                opt(r.report.f_theta),
                opt(r.report.f_a),
                opt(r.report.f_s_train),
                opt(r.report.f_s_test),
                fmt_f64(r.report.sigma2),
                r.report.support_exact.map(|b| b.to_string()).unwrap_or_default(),
                r.iterations.to_string(),
                r.converged.to_string(),
                fmt_f64(r.final_loglik),
            ];
            row.extend(r.report.n_feat.iter().map(|n| n.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Coefficient table: `mode,term,label,truth,mean,std`, plus a final
    /// `sigma2` row. Modes are 1-based.
    pub fn write_coefficients_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "term", "label", "truth", "mean", "std"])?;
        for c in &self.coefficients {
            out.write_record([
                (c.mode + 1).to_string(),
                c.term.to_string(),
                c.label.clone(),
                fmt_f64(c.truth),
                fmt_f64(c.estimate.mean),
                fmt_f64(c.estimate.std),
            ])?;
        }
        out.write_record([
            String::new(),
            String::new(),
            "sigma2".into(),
            fmt_f64(self.sigma2_truth),
            fmt_f64(self.sigma2.mean),
            fmt_f64(self.sigma2.std),
        ])?;
        out.flush()?;
        Ok(())
    }

    /// Index table: `index,mean,median,std`.
    pub fn write_indexes_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "mean", "median", "std"])?;
        for (name, s) in &self.indexes {
            out.write_record([name.clone(), fmt_f64(s.mean), fmt_f64(s.median), fmt_f64(s.std)])?;
        }
        out.write_record([
            "support_recovery_rate".to_string(),
            fmt_f64(self.support_recovery_rate),
            String::new(),
            String::new(),
        ])?;
        out.flush()?;
        Ok(())
    }
}
