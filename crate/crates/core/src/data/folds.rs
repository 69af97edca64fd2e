use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Stratified assignment of rows to folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&r| self.assignments[r] == fold)
            .collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&r| self.assignments[r] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles each group independently and deals its rows round-robin, with
/// one counter running across groups so fold sizes differ by at most one.
///
/// Every group needs at least `n_folds` rows, except for leave-one-out
/// (`n_folds == rows`) where stratification cannot apply.
pub fn split_kfold(groups: &[usize], n_folds: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if n_folds < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need at least two folds, got {n_folds}"
        )));
    }
    let n = groups.len();
    if n_folds > n {
        return Err(DataError::InvalidArgument(format!(
            "{n_folds} folds for {n} rows"
        )));
    }
    let k = groups.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (r, &g) in groups.iter().enumerate() {
        members[g].push(r);
    }
    if n_folds < n {
        for (g, rows) in members.iter().enumerate() {
            if !rows.is_empty() && rows.len() < n_folds {
                return Err(DataError::GroupTooSmall {
                    group: g,
                    size: rows.len(),
                    folds: n_folds,
                });
            }
        }
    }
    let mut rng = crate::rng::seeded(seed);
    let mut assignments = vec![0; n];
    let mut counter = 0usize;
    for rows in members.iter_mut() {
        rows.shuffle(&mut rng);
        for &r in rows.iter() {
            assignments[r] = counter % n_folds;
            counter += 1;
        }
    }
    Ok(FoldPlan {
        n_folds,
        seed,
        assignments,
    })
}

/// Stratified train/validation split; returns (train rows, validation rows).
pub fn holdout_split(
    groups: &[usize],
    valid_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(0.0..1.0).contains(&valid_fraction) || valid_fraction == 0.0 {
        return Err(DataError::InvalidArgument(format!(
            "validation fraction {valid_fraction} outside (0, 1)"
        )));
    }
    let k = groups.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (r, &g) in groups.iter().enumerate() {
        members[g].push(r);
    }
    let mut rng = crate::rng::seeded(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (g, rows) in members.iter_mut().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(DataError::GroupTooSmall {
                group: g,
                size: rows.len(),
                folds: 2,
            });
        }
        rows.shuffle(&mut rng);
        let n_valid = ((rows.len() as f64 * valid_fraction).round() as usize)
            .clamp(1, rows.len() - 1);
        valid.extend_from_slice(&rows[..n_valid]);
        train.extend_from_slice(&rows[n_valid..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    Ok((train, valid))
}
