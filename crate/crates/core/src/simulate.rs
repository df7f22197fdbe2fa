//! Simulation of switched Markov polynomial NARX trajectories.

use ndarray::{array, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{enumerate_basis, BasisConfig, PolynomialBasis};
use crate::dataset::{Segment, Split, TrajectoryDataset};
use crate::model::{ModelError, ModelRepr, SmnarxModel};
use crate::seeds::{stream_rng, Stream};

/// Default bound on `|y_k|` before a trajectory is declared divergent.
pub const OVERFLOW_GUARD: f64 = 1e6;
const TRUTH_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid system: {0}")]
    Invalid(#[from] ModelError),
    #[error("invalid input law: {0}")]
    InputLaw(String),
    #[error("need more than {warm_up} samples, got {n}")]
    TooShort { n: usize, warm_up: usize },
    #[error("trajectory diverged at k={k}: |y| = {value:e} exceeds {guard:e}")]
    Diverged { k: usize, value: f64, guard: f64 },
}

/// Distribution of the exogenous input, i.i.d. over time and channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputLaw {
    Uniform { lo: f64, hi: f64 },
}

/// A data-generating system: a parameter set whose noise variance may be
/// zero, plus the input law.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueSystem {
    pub model: SmnarxModel,
    pub input_law: InputLaw,
}

impl TrueSystem {
    pub fn new(model: SmnarxModel, input_law: InputLaw) -> Result<Self, SimError> {
        let sys = TrueSystem { model, input_law };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.model.validate_with(TRUTH_TOL, 0.0)?;
        let InputLaw::Uniform { lo, hi } = self.input_law;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(SimError::InputLaw(format!("uniform bounds [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.model.modes()
    }

    pub fn noise_std(&self) -> f64 {
        self.model.sigma2.sqrt()
    }
}

#[derive(Serialize, Deserialize)]
struct TrueSystemRepr {
    #[serde(flatten)]
    model: ModelRepr,
    input_law: InputLaw,
}

impl Serialize for TrueSystem {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TrueSystemRepr {
            model: ModelRepr::from_model(&self.model),
            input_law: self.input_law,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TrueSystem {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = TrueSystemRepr::deserialize(d)?;
        let model = repr.model.into_model_unchecked().map_err(D::Error::custom)?;
        TrueSystem::new(model, repr.input_law).map_err(D::Error::custom)
    }
}

/// The three-mode benchmark system with lags `n_a = n_b = 4` and degree 3.
pub fn benchmark_system() -> TrueSystem {
    let basis = enumerate_basis(BasisConfig::new(4, 4, 1, 3).expect("valid config"));
    // lagged layout: y[k-1..k-4] -> 0..4, u[k-1..k-4] -> 4..8
    let (y1, y2, u1, u2, u3) = (0, 1, 4, 5, 6);
    let modes: [&[(&[(usize, u32)], f64)]; 3] = [
        &[
            (&[(y1, 1)], 0.5),
            (&[(u2, 1)], 0.8),
            (&[(u1, 2)], 1.0),
            (&[(y2, 2)], -0.3),
        ],
        &[
            (&[(y1, 3)], 0.2),
            (&[(y2, 1)], -0.5),
            (&[(y2, 1), (u2, 2)], -0.7),
            (&[(u2, 2)], 0.6),
        ],
        &[
            (&[(y2, 1)], 0.5),
            (&[(y1, 1)], -0.4),
            (&[(u1, 1)], 0.2),
            (&[(u3, 1), (y1, 1)], -0.4),
        ],
    ];
    let mut theta = Array2::zeros((3, basis.len()));
    for (s, terms) in modes.iter().enumerate() {
        for (factors, value) in terms.iter() {
            let i = basis.index_of_factors(factors).expect("term in basis");
            theta[[s, i]] = *value;
        }
    }
    let model = SmnarxModel {
        basis,
        theta,
        sigma2: 0.1f64 * 0.1,
        transition: array![[0.98, 0.02, 0.0], [0.0, 0.98, 0.02], [0.02, 0.0, 0.98]],
        initial: vec![1.0 / 3.0; 3],
    };
    TrueSystem::new(model, InputLaw::Uniform { lo: -1.0, hi: 1.0 }).expect("benchmark is valid")
}

fn draw_categorical<R: Rng>(rng: &mut R, probs: ArrayView1<f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum: take the last state with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws an `n`-sample trajectory from `system` using the simulation stream
/// derived from `seed`.
pub fn simulate(system: &TrueSystem, n: usize, seed: u64) -> Result<TrajectoryDataset, SimError> {
    simulate_with_guard(system, n, seed, OVERFLOW_GUARD)
}

pub fn simulate_with_guard(
    system: &TrueSystem,
    n: usize,
    seed: u64,
    guard: f64,
) -> Result<TrajectoryDataset, SimError> {
    system.validate()?;
    let model = &system.model;
    let cfg: &BasisConfig = model.basis.config();
    let warm_up = cfg.warm_up();
    if n <= warm_up {
        return Err(SimError::TooShort { n, warm_up });
    }
    let q = cfg.q;
    let mut rng = stream_rng(seed, Stream::Simulation);
    let InputLaw::Uniform { lo, hi } = system.input_law;
    let input = Uniform::new_inclusive(lo, hi).map_err(|e| SimError::InputLaw(e.to_string()))?;
    let noise = Normal::new(0.0, system.noise_std()).expect("finite non-negative std");
    let basis: &PolynomialBasis = &model.basis;

    // Lagged values before k = 1 are zero; history buffers are prefixed with
    // warm_up zeros and the returned segment starts after them.
    let mut ys = vec![0.0; warm_up];
    let mut us = vec![0.0; warm_up * q];
    let mut zs = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(cfg.lag_len());
    let mut phi = vec![0.0; basis.len()];
    let mut z = 0;
    for k in 0..n {
        z = if k == 0 {
            draw_categorical(&mut rng, ArrayView1::from(&model.initial))
        } else {
            draw_categorical(&mut rng, model.transition.row(z))
        };
        let t = warm_up + k;
        x.clear();
        for lag in 1..=cfg.n_a {
            x.push(ys[t - lag]);
        }
        for lag in 1..=cfg.n_b {
            x.extend_from_slice(&us[(t - lag) * q..(t - lag + 1) * q]);
        }
        basis.evaluate_into(&x, &mut phi);
        let mean: f64 = model.theta.row(z).iter().zip(&phi).map(|(a, b)| a * b).sum();
        let y = mean + noise.sample(&mut rng);
        if !y.is_finite() || y.abs() > guard {
            return Err(SimError::Diverged {
                k: k + 1,
                value: y.abs(),
                guard,
            });
        }
        ys.push(y);
        for _ in 0..q {
            us.push(input.sample(&mut rng));
        }
        zs.push(z);
    }
    Ok(TrajectoryDataset {
        segments: vec![Segment {
            split: Split::None,
            start: 0,
            inputs: us.split_off(warm_up * q),
            input_dim: q,
            outputs: ys.split_off(warm_up),
            modes: Some(zs),
        }],
    })
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(transition: &Array2<f64>) -> Vec<f64> {
    let s = transition.nrows();
    let mut p = ndarray::Array1::from_elem(s, 1.0 / s as f64);
    for _ in 0..100_000 {
        let next = p.dot(transition);
        let diff = (&next - &p).mapv(f64::abs).sum();
        p = next;
        if diff < 1e-15 {
            break;
        }
    }
    p.to_vec()
}
