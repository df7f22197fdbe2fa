//! Polynomial regressor dictionaries over lagged input/output vectors.
//!
//! A NARX regressor `x_k` stacks the `n_a` most recent outputs followed by
//! the `n_b` most recent input vectors:
//!
//! ```text
//! x_k = [y_{k-1}, ..., y_{k-n_a}, u_{k-1}^T, ..., u_{k-n_b}^T]^T
//! ```
//!
//! The dictionary holds every monomial of `x_k` with total degree at most
//! `n_d`, constant term included, in graded lexicographic order.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Segment, TrajectoryDataset};

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("invalid basis configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("segment {segment} has {len} samples but at least {required} are needed")]
    SegmentTooShort {
        segment: usize,
        len: usize,
        required: usize,
    },
    #[error("no usable rows in dataset")]
    NoRows,
    #[error("serialized terms do not match the enumerated basis for {0:?}")]
    TermMismatch(BasisConfig),
}

/// Lag orders, input dimension and maximum monomial degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisConfig {
    pub n_a: usize,
    pub n_b: usize,
    pub q: usize,
    pub n_d: usize,
}

impl BasisConfig {
    pub fn new(n_a: usize, n_b: usize, q: usize, n_d: usize) -> Result<Self, BasisError> {
        let cfg = BasisConfig { n_a, n_b, q, n_d };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BasisError> {
        for (name, v) in [
            ("n_a", self.n_a),
            ("n_b", self.n_b),
            ("q", self.q),
            ("n_d", self.n_d),
        ] {
            if v == 0 {
                return Err(BasisError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Length of the lagged vector, `n_a + q * n_b`.
    pub fn lag_len(&self) -> usize {
        self.n_a + self.q * self.n_b
    }

    /// Samples consumed at the start of each segment before `x_k` is defined.
    pub fn warm_up(&self) -> usize {
        self.n_a.max(self.n_b)
    }

    /// Human readable name of lagged component `idx`.
    pub fn variable_name(&self, idx: usize) -> String {
        if idx < self.n_a {
            format!("y[k-{}]", idx + 1)
        } else {
            let j = idx - self.n_a;
            let lag = j / self.q + 1;
            if self.q == 1 {
                format!("u[k-{lag}]")
            } else {
                format!("u{}[k-{lag}]", j % self.q + 1)
            }
        }
    }
}

/// `C(n, k)` without overflow for the sizes used here.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Lagged regressor vector `x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedVector(Vec<f64>);

impl LaggedVector {
    pub fn new(config: &BasisConfig, entries: Vec<f64>) -> Result<Self, BasisError> {
        if entries.len() != config.lag_len() {
            return Err(BasisError::DimensionMismatch {
                expected: config.lag_len(),
                got: entries.len(),
            });
        }
        Ok(LaggedVector(entries))
    }

    /// Builds `x_k` for sample `k` of a segment; `k` must be at least the warm-up.
    pub fn from_segment(config: &BasisConfig, segment: &Segment, k: usize) -> Self {
        let mut out = Vec::with_capacity(config.lag_len());
        fill_lagged(config, segment, k, &mut out);
        LaggedVector(out)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn fill_lagged(config: &BasisConfig, segment: &Segment, k: usize, out: &mut Vec<f64>) {
    out.clear();
    for lag in 1..=config.n_a {
        out.push(segment.outputs[k - lag]);
    }
    for lag in 1..=config.n_b {
        out.extend_from_slice(segment.input(k - lag));
    }
}

/// Monomial dictionary `{phi_i}` in graded lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    config: BasisConfig,
    terms: Vec<Vec<u32>>,
    // term t (t > 0) equals term parent[t].0 times variable parent[t].1
    parents: Vec<(usize, usize)>,
}

/// All exponent vectors of length `p` and total degree exactly `d`, in
/// descending lexicographic order.
fn exponents_of_degree(p: usize, d: u32) -> Vec<Vec<u32>> {
    fn rec(p: usize, pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos == p - 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for e in (0..=left).rev() {
            cur.push(e);
            rec(p, pos + 1, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(p, 0, d, &mut Vec::with_capacity(p), &mut out);
    out
}

fn enumerate_terms(p: usize, max_degree: usize) -> Vec<Vec<u32>> {
    (0..=max_degree as u32)
        .flat_map(|d| exponents_of_degree(p, d))
        .collect()
}

fn parent_table(terms: &[Vec<u32>]) -> Vec<(usize, usize)> {
    let index: HashMap<&[u32], usize> = terms
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_slice(), i))
        .collect();
    terms
        .iter()
        .map(|t| match t.iter().rposition(|&e| e > 0) {
            None => (0, 0),
            Some(var) => {
                let mut reduced = t.clone();
                reduced[var] -= 1;
                (index[reduced.as_slice()], var)
            }
        })
        .collect()
}

/// Enumerates all monomials of degree `<= n_d` over the lagged vector.
pub fn enumerate_basis(config: BasisConfig) -> PolynomialBasis {
    PolynomialBasis::new(config)
}

impl PolynomialBasis {
    pub fn new(config: BasisConfig) -> Self {
        let terms = enumerate_terms(config.lag_len(), config.n_d);
        let parents = parent_table(&terms);
        PolynomialBasis {
            config,
            terms,
            parents,
        }
    }

    pub fn config(&self) -> &BasisConfig {
        &self.config
    }

    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    /// Number of regressors `n`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, exponents: &[u32]) -> Option<usize> {
        self.terms.iter().position(|t| t == exponents)
    }

    /// Index of the monomial given as `(lagged variable, power)` factors.
    pub fn index_of_factors(&self, factors: &[(usize, u32)]) -> Option<usize> {
        let mut e = vec![0u32; self.config.lag_len()];
        for &(var, pow) in factors {
            *e.get_mut(var)? += pow;
        }
        self.index_of(&e)
    }

    pub fn term_label(&self, idx: usize) -> String {
        let t = &self.terms[idx];
        let parts: Vec<String> = t
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(v, &e)| {
                let name = self.config.variable_name(v);
                if e == 1 {
                    name
                } else {
                    format!("{name}^{e}")
                }
            })
            .collect();
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }

    /// Writes `phi_i(x)` for every term into `out`, which must have length `n`.
    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.config.lag_len());
        debug_assert_eq!(out.len(), self.terms.len());
        out[0] = 1.0;
        for t in 1..out.len() {
            let (parent, var) = self.parents[t];
            out[t] = out[parent] * x[var];
        }
    }

    pub fn evaluate(&self, x: &LaggedVector) -> Result<Vec<f64>, BasisError> {
        evaluate_regressors(self, x)
    }
}

/// Evaluates the dictionary at `x`.
pub fn evaluate_regressors(basis: &PolynomialBasis, x: &LaggedVector) -> Result<Vec<f64>, BasisError> {
    let xs = x.as_slice();
    if xs.len() != basis.config.lag_len() {
        return Err(BasisError::DimensionMismatch {
            expected: basis.config.lag_len(),
            got: xs.len(),
        });
    }
    let mut out = vec![0.0; basis.len()];
    basis.evaluate_into(xs, &mut out);
    Ok(out)
}

impl fmt::Display for PolynomialBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = (0..self.len()).map(|i| self.term_label(i)).collect();
        write!(f, "{{{}}}", labels.join(", "))
    }
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    config: BasisConfig,
    terms: Vec<Vec<u32>>,
}

impl Serialize for PolynomialBasis {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        BasisRepr {
            config: self.config,
            terms: self.terms.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolynomialBasis {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = BasisRepr::deserialize(d)?;
        repr.config.validate().map_err(D::Error::custom)?;
        let basis = PolynomialBasis::new(repr.config);
        if basis.terms != repr.terms {
            return Err(D::Error::custom(BasisError::TermMismatch(repr.config)));
        }
        Ok(basis)
    }
}

/// Where a design-matrix row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSource {
    /// Index of the segment within the dataset.
    pub segment: usize,
    /// Sample position inside the segment.
    pub sample: usize,
}

/// Stacked regressors for a set of segments.
///
/// Rows of one segment are contiguous; `segment_rows[i]` gives the row range
/// of the `i`-th included segment and `sources` maps every row back to its
/// sample so posteriors line up with ground truth.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub phi: Array2<f64>,
    pub lagged: Array2<f64>,
    pub targets: Vec<f64>,
    pub sources: Vec<RowSource>,
    pub segment_rows: Vec<std::ops::Range<usize>>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn segments(&self) -> impl Iterator<Item = SegmentView<'_>> + '_ {
        self.segment_rows.iter().map(move |r| SegmentView {
            phi: self.phi.slice(ndarray::s![r.clone(), ..]),
            targets: &self.targets[r.clone()],
        })
    }

    /// Builds the rows for the segments of `dataset` accepted by `keep`.
    pub fn build_filtered<F>(
        basis: &PolynomialBasis,
        dataset: &TrajectoryDataset,
        keep: F,
    ) -> Result<Self, BasisError>
    where
        F: Fn(&Segment) -> bool,
    {
        let cfg = basis.config();
        let warm = cfg.warm_up();
        let p = cfg.lag_len();
        let n = basis.len();
        let mut phi = Vec::new();
        let mut lagged = Vec::new();
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        let mut segment_rows = Vec::new();
        let mut x = Vec::with_capacity(p);
        let mut row = vec![0.0; n];
        for (si, seg) in dataset.segments.iter().enumerate() {
            if !keep(seg) {
                continue;
            }
            if seg.input_dim() != cfg.q {
                return Err(BasisError::DimensionMismatch {
                    expected: cfg.q,
                    got: seg.input_dim(),
                });
            }
            if seg.len() <= warm {
                return Err(BasisError::SegmentTooShort {
                    segment: si,
                    len: seg.len(),
                    required: warm + 1,
                });
            }
            let start = targets.len();
            for k in warm..seg.len() {
                fill_lagged(cfg, seg, k, &mut x);
                basis.evaluate_into(&x, &mut row);
                phi.extend_from_slice(&row);
                lagged.extend_from_slice(&x);
                targets.push(seg.outputs[k]);
                sources.push(RowSource {
                    segment: si,
                    sample: k,
                });
            }
            segment_rows.push(start..targets.len());
        }
        if targets.is_empty() {
            return Err(BasisError::NoRows);
        }
        let rows = targets.len();
        Ok(DesignMatrix {
            phi: Array2::from_shape_vec((rows, n), phi).expect("row-major layout"),
            lagged: Array2::from_shape_vec((rows, p), lagged).expect("row-major layout"),
            targets,
            sources,
            segment_rows,
        })
    }
}

/// Borrowed rows and targets of a single segment.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    pub phi: ndarray::ArrayView2<'a, f64>,
    pub targets: &'a [f64],
}

/// Design matrix over every segment of the dataset.
pub fn build_design_matrix(
    basis: &PolynomialBasis,
    dataset: &TrajectoryDataset,
) -> Result<DesignMatrix, BasisError> {
    DesignMatrix::build_filtered(basis, dataset, |_| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Segment, Split};

    fn cfg(n_a: usize, n_b: usize, q: usize, n_d: usize) -> BasisConfig {
        BasisConfig::new(n_a, n_b, q, n_d).unwrap()
    }

    #[test]
    fn benchmark_config_has_165_terms() {
        assert_eq!(enumerate_basis(cfg(4, 4, 1, 3)).len(), 165);
    }

    #[test]
    fn small_counts() {
        let b = enumerate_basis(cfg(1, 1, 1, 1));
        assert_eq!(b.len(), 3);
        assert_eq!(b.term_label(0), "1");
        assert_eq!(b.term_label(1), "y[k-1]");
        assert_eq!(b.term_label(2), "u[k-1]");
        assert_eq!(enumerate_basis(cfg(2, 1, 1, 2)).len(), 10);
    }

    #[test]
    fn zero_config_rejected() {
        assert!(BasisConfig::new(0, 1, 1, 1).is_err());
        assert!(BasisConfig::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn graded_lex_order_two_variables() {
        let b = enumerate_basis(cfg(1, 1, 1, 2));
        let expect: Vec<Vec<u32>> = vec![
            vec![0, 0],
            vec![1, 0],
            vec![0, 1],
            vec![2, 0],
            vec![1, 1],
            vec![0, 2],
        ];
        assert_eq!(b.terms(), expect.as_slice());
        let x = LaggedVector::new(b.config(), vec![2.0, 3.0]).unwrap();
        assert_eq!(b.evaluate(&x).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn zero_and_unit_inputs() {
        let b = enumerate_basis(cfg(2, 2, 1, 3));
        let zero = LaggedVector::new(b.config(), vec![0.0; 4]).unwrap();
        let v = b.evaluate(&zero).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&e| e == 0.0));

        let unit = LaggedVector::new(b.config(), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let v = b.evaluate(&unit).unwrap();
        for (t, val) in b.terms().iter().zip(&v) {
            let only_var1 = t[0] == 0 && t[2] == 0 && t[3] == 0;
            assert_eq!(*val, if only_var1 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn dimension_mismatch() {
        let b = enumerate_basis(cfg(2, 2, 1, 2));
        assert!(LaggedVector::new(b.config(), vec![1.0; 3]).is_err());
        let other = BasisConfig::new(1, 1, 1, 2).unwrap();
        let x = LaggedVector::new(&other, vec![1.0; 2]).unwrap();
        assert_eq!(
            evaluate_regressors(&b, &x),
            Err(BasisError::DimensionMismatch {
                expected: 4,
                got: 2
            })
        );
    }

    #[test]
    fn serialization_is_stable_and_checked() {
        let a = serde_json::to_string(&enumerate_basis(cfg(2, 3, 2, 2))).unwrap();
        let b = serde_json::to_string(&enumerate_basis(cfg(2, 3, 2, 2))).unwrap();
        assert_eq!(a, b);
        let back: PolynomialBasis = serde_json::from_str(&a).unwrap();
        assert_eq!(back, enumerate_basis(cfg(2, 3, 2, 2)));

        let tampered = a.replacen("[0,0,0,0,0,0,0,0]", "[0,0,0,0,0,0,0,1]", 1);
        assert!(serde_json::from_str::<PolynomialBasis>(&tampered).is_err());
    }

    fn segment(len: usize, split: Split) -> Segment {
        Segment {
            split,
            start: 0,
            inputs: (0..len).map(|k| k as f64 * 0.1).collect(),
            input_dim: 1,
            outputs: (0..len).map(|k| (k as f64).sin()).collect(),
            modes: None,
        }
    }

    #[test]
    fn design_matrix_drops_warm_up() {
        let b = enumerate_basis(cfg(4, 4, 1, 3));
        let ds = TrajectoryDataset {
            segments: vec![segment(200, Split::Train)],
        };
        let d = build_design_matrix(&b, &ds).unwrap();
        assert_eq!(d.rows(), 196);
        assert_eq!(d.phi.ncols(), 165);
        assert_eq!(d.sources[0], RowSource { segment: 0, sample: 4 });
        // y[k-1] column of row 0 is y_3
        assert_eq!(d.phi[[0, 1]], 3f64.sin());

        let ds2 = TrajectoryDataset {
            segments: vec![segment(200, Split::Train), segment(200, Split::Train)],
        };
        let d2 = build_design_matrix(&b, &ds2).unwrap();
        assert_eq!(d2.rows(), 392);
        assert_eq!(d2.segment_rows, vec![0..196, 196..392]);
    }

    #[test]
    fn design_matrix_too_short() {
        let b = enumerate_basis(cfg(4, 4, 1, 3));
        let ds = TrajectoryDataset {
            segments: vec![segment(4, Split::Train)],
        };
        assert!(matches!(
            build_design_matrix(&b, &ds),
            Err(BasisError::SegmentTooShort { required: 5, .. })
        ));
    }

    #[test]
    fn factor_lookup() {
        let b = enumerate_basis(cfg(4, 4, 1, 3));
        let i = b.index_of_factors(&[(0, 1), (5, 2)]).unwrap();
        assert_eq!(b.term_label(i), "y[k-1]*u[k-2]^2");
    }
}
