//! Entropic optimal-transport divergence between two point clouds.
//!
//! Uniform weights, squared Euclidean cost, log-domain Sinkhorn iterations.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SinkhornError {
    #[error("point clouds have {0} and {1} columns")]
    ColumnMismatch(usize, usize),
    #[error("empty point cloud")]
    Empty,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Regularisation; `None` uses 5% of the median cross-pair cost.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    pub tolerance: f64,
    pub debiased: bool,
    /// Larger clouds are subsampled to this many rows.
    pub max_rows: usize,
    pub seed: u64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_iters: 500,
            tolerance: 1e-9,
            debiased: true,
            max_rows: 2000,
            seed: 0,
        }
    }
}

pub const EPSILON_MEDIAN_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    pub value: f64,
    pub epsilon: f64,
    /// Largest iteration count among the transport problems solved.
    pub iterations: usize,
    /// False if any transport problem hit `max_iters`; `value` is then the
    /// last iterate.
    pub converged: bool,
    pub subsampled: bool,
}

fn cost_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.nrows()));
    c.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let ai = a.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        });
    c
}

/// Median of all entries.
fn median(c: &Array2<f64>) -> f64 {
    let mut v: Vec<f64> = c.iter().copied().collect();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *m;
    if v.len() % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

struct Transport {
    value: f64,
    iterations: usize,
    converged: bool,
}

/// `out_i = -eps * log sum_j exp((pot_j - C_ij) / eps + log_w)`
fn soft_min(c: &Array2<f64>, pot: &Array1<f64>, log_w: f64, eps: f64, by_row: bool, out: &mut Array1<f64>) {
    let lines = if by_row { c.axis_iter(Axis(0)) } else { c.axis_iter(Axis(1)) };
    let vals: Vec<f64> = lines
        .into_par_iter()
        .map(|line| {
            let mut max = f64::NEG_INFINITY;
            for (cij, pj) in line.iter().zip(pot.iter()) {
                max = max.max((pj - cij) / eps);
            }
            let s: f64 = line
                .iter()
                .zip(pot.iter())
                .map(|(cij, pj)| ((pj - cij) / eps - max).exp())
                .sum();
            -eps * (max + s.ln() + log_w)
        })
        .collect();
    out.assign(&Array1::from(vals));
}

/// Regularised transport cost between uniform measures, as the dual value.
fn transport(c: &Array2<f64>, eps: f64, max_iters: usize, tol: f64) -> Transport {
    let (n, m) = c.dim();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut f_new = f.clone();
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=max_iters {
        iterations = it;
        soft_min(c, &g, log_b, eps, true, &mut f_new);
        let change = f_new
            .iter()
            .zip(f.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut f, &mut f_new);
        let f_now = f.clone();
        soft_min(c, &f_now, log_a, eps, false, &mut g);
        if change < tol {
            converged = true;
            break;
        }
    }
    let value = f.mean().unwrap_or(0.0) + g.mean().unwrap_or(0.0);
    Transport {
        value,
        iterations,
        converged,
    }
}

fn subsample(x: ArrayView2<f64>, max_rows: usize, seed: u64) -> (Array2<f64>, bool) {
    if x.nrows() <= max_rows {
        return (x.to_owned(), false);
    }
    let mut rng = crate::rng::seeded(seed);
    let mut idx = sample(&mut rng, x.nrows(), max_rows).into_vec();
    idx.sort_unstable();
    (x.select(Axis(0), &idx), true)
}

/// Total order on clouds, used to solve every pair in one orientation.
fn cloud_order(a: &Array2<f64>, b: &Array2<f64>) -> Ordering {
    a.dim().cmp(&b.dim()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Sinkhorn divergence between the rows of `a` and `b`.
///
/// With `debiased`, returns `OT(a,b) - OT(a,a)/2 - OT(b,b)/2` using one
/// epsilon for all three problems, so `a == b` gives exactly zero.
pub fn sinkhorn_divergence(a: ArrayView2<f64>, b: ArrayView2<f64>, config: &SinkhornConfig) -> Result<SinkhornResult, SinkhornError> {
    if a.ncols() != b.ncols() {
        return Err(SinkhornError::ColumnMismatch(a.ncols(), b.ncols()));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(SinkhornError::Empty);
    }
    if config.max_iters == 0 || config.epsilon.is_some_and(|e| !(e > 0.0)) || config.max_rows == 0 {
        return Err(SinkhornError::InvalidConfig(
            "epsilon must be positive, max_iters and max_rows at least 1".into(),
        ));
    }
    let (mut a, sa) = subsample(a, config.max_rows, crate::rng::derive_seed(config.seed, "sinkhorn/a"));
    let (mut b, sb) = subsample(b, config.max_rows, crate::rng::derive_seed(config.seed, "sinkhorn/b"));
    // The divergence is symmetric; solving in a canonical orientation makes
    // the computed value symmetric too.
    if cloud_order(&a, &b) == Ordering::Greater {
        std::mem::swap(&mut a, &mut b);
    }
    let cab = cost_matrix(a.view(), b.view());
    let eps = match config.epsilon {
        Some(e) => e,
        None => {
            let med = median(&cab);
            if med > 0.0 {
                EPSILON_MEDIAN_FRACTION * med
            } else {
                EPSILON_MEDIAN_FRACTION
            }
        }
    };
    let solve = |c: &Array2<f64>| transport(c, eps, config.max_iters, config.tolerance);
    let ab = solve(&cab);
    let mut result = SinkhornResult {
        value: ab.value,
        epsilon: eps,
        iterations: ab.iterations,
        converged: ab.converged,
        subsampled: sa || sb,
    };
    if config.debiased {
        let aa = solve(&cost_matrix(a.view(), a.view()));
        let bb = solve(&cost_matrix(b.view(), b.view()));
        result.value = ab.value - 0.5 * aa.value - 0.5 * bb.value;
        result.iterations = ab.iterations.max(aa.iterations).max(bb.iterations);
        result.converged = ab.converged && aa.converged && bb.converged;
    }
    if !result.converged {
        log::warn!(
            "Sinkhorn stopped after {} iterations without reaching tolerance {}",
            result.iterations,
            config.tolerance
        );
    }
    Ok(result)
}
