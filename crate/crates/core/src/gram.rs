//! Weighted sufficient statistics for the per-mode regressions.
//!
//! For a polynomial dictionary every Gram entry `sum_k w_k phi_i phi_j` is a
//! weighted moment of the monomial with exponent `e_i + e_j`, so the full
//! `n x n` matrix follows from the moments of all monomials of degree up to
//! `2 n_d`. For the benchmark dictionary that is 3003 moments instead of
//! 13695 distinct Gram entries, and the monomial evaluation is shared by all
//! modes. Small active sets are accumulated directly on their columns.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};

use crate::basis::{enumerate_basis, BasisConfig, DesignMatrix, PolynomialBasis};
use crate::solver::GramSystem;

/// Maps Gram entries onto monomial moments.
#[derive(Debug, Clone)]
pub struct MomentMap {
    moments: PolynomialBasis,
    // pair[i * n + j] = index of e_i + e_j in `moments`
    pair: Vec<u32>,
    n: usize,
}

impl MomentMap {
    pub fn new(basis: &PolynomialBasis) -> Self {
        let cfg = basis.config();
        let moments = enumerate_basis(BasisConfig {
            n_d: 2 * cfg.n_d,
            ..*cfg
        });
        let index: HashMap<&[u32], usize> = moments
            .terms()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_slice(), i))
            .collect();
        let n = basis.len();
        let mut pair = vec![0u32; n * n];
        let mut sum = vec![0u32; cfg.lag_len()];
        for (i, ti) in basis.terms().iter().enumerate() {
            for (j, tj) in basis.terms().iter().enumerate() {
                for v in 0..sum.len() {
                    sum[v] = ti[v] + tj[v];
                }
                pair[i * n + j] = index[sum.as_slice()] as u32;
            }
        }
        MomentMap { moments, pair, n }
    }

    pub fn moment_count(&self) -> usize {
        self.moments.len()
    }
}

/// Builds one [`GramSystem`] per column of `weights` (`rows x S`).
///
/// `active[s]` restricts mode `s` to a subset of columns; entries outside
/// the subset are left at zero.
pub fn weighted_systems(
    design: &DesignMatrix,
    moments: Option<&MomentMap>,
    weights: ArrayView2<f64>,
    active: &[Option<Vec<usize>>],
) -> Vec<GramSystem> {
    let rows = design.rows();
    let n = design.phi.ncols();
    let s = weights.ncols();
    assert_eq!(weights.nrows(), rows);
    assert_eq!(active.len(), s);

    let direct_cost = |a: &Option<Vec<usize>>| {
        let m = a.as_ref().map_or(n, Vec::len);
        m * (m + 1) / 2
    };
    let use_moments: Vec<bool> = active
        .iter()
        .map(|a| moments.is_some_and(|mm| direct_cost(a) > mm.moment_count()))
        .collect();

    let mut systems: Vec<GramSystem> = (0..s)
        .map(|_| GramSystem {
            gram: Array2::zeros((n, n)),
            xty: vec![0.0; n],
            yty: 0.0,
            weight_sum: 0.0,
        })
        .collect();

    // weight sums, y^T W y and Phi^T W y for every mode
    for (k, phi) in design.phi.rows().into_iter().enumerate() {
        let y = design.targets[k];
        let phi = phi.as_slice().expect("row-major design");
        for (m, sys) in systems.iter_mut().enumerate() {
            let w = weights[[k, m]];
            if w == 0.0 {
                continue;
            }
            sys.weight_sum += w;
            sys.yty += w * y * y;
            let wy = w * y;
            match &active[m] {
                None => {
                    for (acc, &p) in sys.xty.iter_mut().zip(phi) {
                        *acc += wy * p;
                    }
                }
                Some(idx) => {
                    for &i in idx {
                        sys.xty[i] += wy * phi[i];
                    }
                }
            }
        }
    }

    if use_moments.iter().any(|&b| b) {
        let mm = moments.expect("checked above");
        let count = mm.moment_count();
        let modes: Vec<usize> = (0..s).filter(|&m| use_moments[m]).collect();
        let mut acc = vec![vec![0.0; count]; modes.len()];
        let mut vals = vec![0.0; count];
        for (k, x) in design.lagged.rows().into_iter().enumerate() {
            mm.moments
                .evaluate_into(x.as_slice().expect("row-major lagged"), &mut vals);
            for (a, &m) in acc.iter_mut().zip(&modes) {
                let w = weights[[k, m]];
                if w != 0.0 {
                    a.iter_mut().zip(&vals).for_each(|(a, v)| *a += w * v);
                }
            }
        }
        for (t, &m) in modes.iter().enumerate() {
            let g = &mut systems[m].gram;
            let fill = |i: usize, j: usize| acc[t][mm.pair[i * mm.n + j] as usize];
            match &active[m] {
                None => {
                    for i in 0..n {
                        for j in 0..n {
                            g[[i, j]] = fill(i, j);
                        }
                    }
                }
                Some(idx) => {
                    for &i in idx {
                        for &j in idx {
                            g[[i, j]] = fill(i, j);
                        }
                    }
                }
            }
        }
    }

    for m in (0..s).filter(|&m| !use_moments[m]) {
        let cols: Vec<usize> = active[m].clone().unwrap_or_else(|| (0..n).collect());
        let c = cols.len();
        let mut local = vec![0.0; c * c];
        let mut vals = vec![0.0; c];
        for (k, phi) in design.phi.rows().into_iter().enumerate() {
            let w = weights[[k, m]];
            if w == 0.0 {
                continue;
            }
            for (v, &i) in vals.iter_mut().zip(&cols) {
                *v = phi[i];
            }
            for a in 0..c {
                let wa = w * vals[a];
                for b in a..c {
                    local[a * c + b] += wa * vals[b];
                }
            }
        }
        let g = &mut systems[m].gram;
        for a in 0..c {
            for b in a..c {
                let v = local[a * c + b];
                g[[cols[a], cols[b]]] = v;
                g[[cols[b], cols[a]]] = v;
            }
        }
    }
    systems
}
