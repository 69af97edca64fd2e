//! Quantile repair towards a median distribution (disparate impact remover).
//!
//! For every numeric feature each group's values are moved, by rank, part of
//! the way towards the quantile-wise mean of the two group distributions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AttributeKind, AttributeSpec, Column, DataError, Dataset, Role};
use crate::PRIVILEGED;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("quantile repair supports exactly two groups, got {0}")]
    MultiGroupUnsupported(usize),
    #[error("no numeric feature to repair")]
    NoNumericAttributes,
    #[error("repair level {0} outside [0, 1]")]
    InvalidRepairLevel(f64),
    #[error("dataset schema differs from the fitted one")]
    SchemaMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Number of points of the quantile grid, `u_i = i / (GRID - 1)`.
pub const GRID: usize = 1001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRepair {
    pub attribute: String,
    /// Quantile function of each group on the grid.
    pub group_quantiles: Vec<Vec<f64>>,
    /// Quantile-wise mean of the group quantile functions.
    pub median_quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairMap {
    pub repair_level: f64,
    pub schema: Vec<AttributeSpec>,
    pub attributes: Vec<AttributeRepair>,
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile_grid(sorted: &[f64]) -> Vec<f64> {
    let n = sorted.len();
    (0..GRID)
        .map(|i| {
            let pos = i as f64 / (GRID - 1) as f64 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = pos - lo as f64;
            sorted[lo] + t * (sorted[hi] - sorted[lo])
        })
        .collect()
}

/// Rank of `x` in `[0, 1]` by inverting a quantile grid. Values on a flat
/// stretch of the grid get the midpoint of that stretch.
fn rank(q: &[f64], x: f64) -> f64 {
    let last = (q.len() - 1) as f64;
    let first_ge = q.partition_point(|&v| v < x);
    let first_gt = q.partition_point(|&v| v <= x);
    if first_gt > first_ge {
        // x appears on the grid at indices first_ge..first_gt.
        return (first_ge + first_gt - 1) as f64 / 2.0 / last;
    }
    if first_ge == 0 {
        return 0.0;
    }
    if first_ge == q.len() {
        return 1.0;
    }
    let (i, j) = (first_ge - 1, first_ge);
    (i as f64 + (x - q[i]) / (q[j] - q[i])) / last
}

/// Grid positions are snapped to a 1e-9 lattice first, so equal ranks
/// reached through different group grids give bit-identical values.
fn eval_grid(q: &[f64], u: f64) -> f64 {
    let pos = (u.clamp(0.0, 1.0) * (q.len() - 1) as f64 * 1e9).round() / 1e9;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(q.len() - 1);
    q[lo] + (pos - lo as f64) * (q[hi] - q[lo])
}

pub fn fit_dirm(dataset: &Dataset, repair_level: f64) -> Result<RepairMap, BaselineError> {
    if !(0.0..=1.0).contains(&repair_level) {
        return Err(BaselineError::InvalidRepairLevel(repair_level));
    }
    if dataset.k() != 2 {
        return Err(BaselineError::MultiGroupUnsupported(dataset.k()));
    }
    let groups = dataset.groups();
    let mut attributes = Vec::new();
    for (spec, col) in dataset.schema().iter().zip(dataset.columns()) {
        if spec.role != Role::Other {
            continue;
        }
        match (spec.kind, col) {
            (AttributeKind::Numeric, Column::Numeric(v)) => {
                let group_quantiles: Vec<Vec<f64>> = (0..2)
                    .map(|g| {
                        let mut s: Vec<f64> = v
                            .iter()
                            .zip(groups)
                            .filter(|(_, &gg)| gg == g)
                            .map(|(&x, _)| x)
                            .collect();
                        s.sort_by(f64::total_cmp);
                        quantile_grid(&s)
                    })
                    .collect();
                let median_quantiles = (0..GRID)
                    .map(|i| 0.5 * (group_quantiles[0][i] + group_quantiles[1][i]))
                    .collect();
                attributes.push(AttributeRepair {
                    attribute: spec.name.clone(),
                    group_quantiles,
                    median_quantiles,
                });
            }
            _ => log::warn!(
                "categorical attribute `{}` is passed through unrepaired",
                spec.name
            ),
        }
    }
    if attributes.is_empty() {
        return Err(BaselineError::NoNumericAttributes);
    }
    Ok(RepairMap {
        repair_level,
        schema: dataset.schema().to_vec(),
        attributes,
    })
}

/// Repairs numeric features. With `om`, privileged rows keep their
/// original values.
pub fn apply_dirm(map: &RepairMap, dataset: &Dataset, om: bool) -> Result<Dataset, BaselineError> {
    if dataset.schema() != map.schema.as_slice() {
        return Err(BaselineError::SchemaMismatch);
    }
    let groups = dataset.groups();
    let lambda = map.repair_level;
    let mut out = dataset.clone();
    for rep in &map.attributes {
        let Some((_, Column::Numeric(v))) = dataset.column(&rep.attribute) else {
            return Err(BaselineError::SchemaMismatch);
        };
        let repaired: Vec<f64> = v
            .iter()
            .zip(groups)
            .map(|(&x, &g)| {
                if om && g == PRIVILEGED {
                    return x;
                }
                let u = rank(&rep.group_quantiles[g], x);
                let target = eval_grid(&rep.median_quantiles, u);
                (1.0 - lambda) * x + lambda * target
            })
            .collect();
        out = out.with_column(&rep.attribute, Column::Numeric(repaired))?;
    }
    Ok(out)
}
