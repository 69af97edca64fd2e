//! Protection, utility, transformation and group-fairness measures.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{ClassifierError, ClassifierKind, ExternalClassifier};
use crate::data::{Column, Dataset, EncodedMatrix, Role};
use crate::PRIVILEGED;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("group {group} has no rows")]
    MissingGroup { group: usize },
    #[error("need at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no rows in scope {0:?}")]
    EmptyScope(RowScope),
    #[error("no classifiers given")]
    NoClassifiers,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// Which rows a metric looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowScope {
    All,
    Priv,
    Prot,
}

impl RowScope {
    pub fn contains(self, group: usize) -> bool {
        match self {
            RowScope::All => true,
            RowScope::Priv => group == PRIVILEGED,
            RowScope::Prot => group != PRIVILEGED,
        }
    }

    pub fn rows(self, groups: &[usize]) -> Vec<usize> {
        (0..groups.len()).filter(|&r| self.contains(groups[r])).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            RowScope::All => "all",
            RowScope::Priv => "priv",
            RowScope::Prot => "prot",
        }
    }
}

/// Whether the privileged side of an audit used original or mapped rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    OgPrv,
    RcPrv,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::OgPrv => "og_prv",
            Variant::RcPrv => "rc_prv",
        }
    }
}

/// Balanced error rate: one minus the mean over groups of the mean
/// probability given to the true group. Every group in `0..k` must occur.
pub fn ber(probs: &Array2<f64>, labels: &[usize], k: usize) -> Result<f64, MetricsError> {
    if probs.nrows() != labels.len() || probs.ncols() < k {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} probabilities for {} labels and {k} groups",
            probs.dim(),
            labels.len()
        )));
    }
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (r, &g) in labels.iter().enumerate() {
        sums[g] += probs[[r, g]];
        counts[g] += 1;
    }
    if let Some(group) = counts.iter().position(|&c| c == 0) {
        return Err(MetricsError::MissingGroup { group });
    }
    let mean: f64 = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).sum::<f64>() / k as f64;
    Ok(1.0 - mean)
}

/// [`ber`] on hard predictions.
pub fn ber_hard(preds: &[usize], labels: &[usize], k: usize) -> Result<f64, MetricsError> {
    ber(&one_hot(preds, k), labels, k)
}

fn one_hot(preds: &[usize], k: usize) -> Array2<f64> {
    let width = k.max(preds.iter().copied().max().map_or(0, |m| m + 1));
    let mut m = Array2::zeros((preds.len(), width));
    for (r, &p) in preds.iter().enumerate() {
        m[[r, p]] = 1.0;
    }
    m
}

/// Best achievable protection: `((k-1)/k, largest group share)`.
pub fn optimal_protection(k: usize, proportions: &[f64]) -> Result<(f64, f64), MetricsError> {
    if k < 2 {
        return Err(MetricsError::TooFewGroups(k));
    }
    let max = proportions.iter().copied().fold(0.0, f64::max);
    Ok(((k as f64 - 1.0) / k as f64, max))
}

/// Fraction of exact matches.
pub fn sacc(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Plug-in mutual information of two label sequences, in nats.
pub fn mi_discrete(preds: &[usize], labels: &[usize]) -> f64 {
    mi_discrete_base(preds, labels, std::f64::consts::E)
}

pub fn mi_discrete_base(preds: &[usize], labels: &[usize], base: f64) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let kp = preds.iter().copied().max().unwrap_or(0) + 1;
    let kl = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut joint = vec![0usize; kp * kl];
    let mut pp = vec![0usize; kp];
    let mut pl = vec![0usize; kl];
    for (&p, &l) in preds.iter().zip(labels) {
        joint[l * kp + p] += 1;
        pp[p] += 1;
        pl[l] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for l in 0..kl {
        for p in 0..kp {
            let c = joint[l * kp + p];
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (c * nf / (pp[p] as f64 * pl[l] as f64)).ln();
            }
        }
    }
    (mi / base.ln()).max(0.0)
}

fn check_same_shape(a: &EncodedMatrix, b: &EncodedMatrix) -> Result<(), MetricsError> {
    if a.values.dim() != b.values.dim() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.values.dim(),
            b.values.dim()
        )));
    }
    Ok(())
}

/// One minus the mean squared element difference over the scoped rows. The
/// scope is read from `original`'s groups.
pub fn fidelity(original: &EncodedMatrix, transformed: &EncodedMatrix, scope: RowScope) -> Result<f64, MetricsError> {
    check_same_shape(original, transformed)?;
    let rows = scope.rows(&original.groups);
    if rows.is_empty() || original.ncols() == 0 {
        return Err(MetricsError::EmptyScope(scope));
    }
    let mut sse = 0.0;
    for &r in &rows {
        for (a, b) in original.values.row(r).iter().zip(transformed.values.row(r)) {
            sse += (a - b) * (a - b);
        }
    }
    Ok(1.0 - sse / (rows.len() * original.ncols()) as f64)
}

/// Each column independently shuffled across rows.
pub fn permute_columns(x: &Array2<f64>, seed: u64) -> Array2<f64> {
    let mut rng = crate::rng::seeded(seed);
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let mut v = col.to_vec();
        v.shuffle(&mut rng);
        col.assign(&ndarray::Array1::from(v));
    }
    out
}

/// Expected fidelity between `x` and a column-permuted copy of itself:
/// `1 - mean over columns of 2 * population variance`.
pub fn permutation_fidelity_baseline(x: &Array2<f64>) -> f64 {
    if x.ncols() == 0 {
        return 1.0;
    }
    let mean_var: f64 = x
        .columns()
        .into_iter()
        .map(|c| c.var(0.0))
        .sum::<f64>()
        / x.ncols() as f64;
    1.0 - 2.0 * mean_var
}

/// Fraction of scoped rows predicted as the privileged group.
pub fn classification_pc(preds: &[usize], groups: &[usize], scope: RowScope) -> Result<f64, MetricsError> {
    let rows = scope.rows(groups);
    if rows.is_empty() {
        return Err(MetricsError::EmptyScope(scope));
    }
    Ok(rows.iter().filter(|&&r| preds[r] == PRIVILEGED).count() as f64 / rows.len() as f64)
}

/// Mean pairwise Euclidean distance divided by `sqrt(d)`.
pub fn diversity(x: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let d = x.ncols();
    if n < 2 || d == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = x.row(i);
            (i + 1..n)
                .map(|j| {
                    ri.iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
        })
        .sum();
    // Unordered pairs counted once, so double for ordered pairs.
    2.0 * total / ((n * (n - 1)) as f64 * (d as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageReport {
    pub columns: Vec<(String, f64)>,
    /// `None` when the schema has no categorical feature columns.
    pub median: Option<f64>,
}

/// Share of scoped rows whose category changed, per categorical feature.
pub fn categorical_damage(original: &Dataset, transformed: &Dataset, scope: RowScope) -> Result<DamageReport, MetricsError> {
    if original.schema() != transformed.schema() || original.len() != transformed.len() {
        return Err(MetricsError::ShapeMismatch(
            "datasets differ in schema or length".into(),
        ));
    }
    let rows = scope.rows(original.groups());
    if rows.is_empty() {
        return Err(MetricsError::EmptyScope(scope));
    }
    let mut columns = Vec::new();
    for ((spec, a), b) in original
        .schema()
        .iter()
        .zip(original.columns())
        .zip(transformed.columns())
    {
        if spec.role != Role::Other {
            continue;
        }
        if let (Column::Categorical(a), Column::Categorical(b)) = (a, b) {
            let changed = rows.iter().filter(|&&r| a[r] != b[r]).count();
            columns.push((spec.name.clone(), changed as f64 / rows.len() as f64));
        }
    }
    let mut rates: Vec<f64> = columns.iter().map(|c| c.1).collect();
    rates.sort_by(f64::total_cmp);
    let median = match rates.len() {
        0 => None,
        n if n % 2 == 1 => Some(rates[n / 2]),
        n => Some(0.5 * (rates[n / 2 - 1] + rates[n / 2])),
    };
    Ok(DamageReport { columns, median })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub group: usize,
    pub size: usize,
    pub positive_rate: f64,
    /// `None` when the group has no actual positives.
    pub tp_rate: Option<f64>,
    /// `None` when the group has no actual negatives.
    pub fp_rate: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessGaps {
    pub demo_parity: f64,
    pub tp_gap: f64,
    pub fp_gap: f64,
    pub epsilon: f64,
    /// Some rate was undefined for at least one group; its gap covers the
    /// remaining groups only.
    pub degenerate: bool,
    pub groups: Vec<GroupRates>,
}

impl FairnessGaps {
    pub fn within_epsilon(&self) -> bool {
        self.demo_parity <= self.epsilon && self.tp_gap <= self.epsilon && self.fp_gap <= self.epsilon
    }
}

pub const DEFAULT_EPSILON: f64 = 0.05;

fn max_gap(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    if v.len() < 2 {
        0.0
    } else {
        hi - lo
    }
}

/// Positive, true-positive and false-positive rate gaps: the largest
/// absolute difference over all pairs of groups.
pub fn fairness_gaps(y_true: &[bool], y_pred: &[bool], groups: &[usize], k: usize) -> Result<FairnessGaps, MetricsError> {
    if y_true.len() != y_pred.len() || y_true.len() != groups.len() {
        return Err(MetricsError::ShapeMismatch(
            "labels, predictions and groups differ in length".into(),
        ));
    }
    let mut rates = Vec::with_capacity(k);
    for g in 0..k {
        let rows: Vec<usize> = (0..groups.len()).filter(|&r| groups[r] == g).collect();
        if rows.is_empty() {
            return Err(MetricsError::MissingGroup { group: g });
        }
        let n = rows.len() as f64;
        let pos = rows.iter().filter(|&&r| y_pred[r]).count() as f64;
        let actual_pos: Vec<usize> = rows.iter().copied().filter(|&r| y_true[r]).collect();
        let actual_neg: Vec<usize> = rows.iter().copied().filter(|&r| !y_true[r]).collect();
        let rate = |set: &[usize]| {
            (!set.is_empty())
                .then(|| set.iter().filter(|&&r| y_pred[r]).count() as f64 / set.len() as f64)
        };
        let correct = rows.iter().filter(|&&r| y_pred[r] == y_true[r]).count() as f64;
        rates.push(GroupRates {
            group: g,
            size: rows.len(),
            positive_rate: pos / n,
            tp_rate: rate(&actual_pos),
            fp_rate: rate(&actual_neg),
            accuracy: correct / n,
        });
    }
    let degenerate = rates.iter().any(|r| r.tp_rate.is_none() || r.fp_rate.is_none());
    Ok(FairnessGaps {
        demo_parity: max_gap(rates.iter().map(|r| r.positive_rate)),
        tp_gap: max_gap(rates.iter().filter_map(|r| r.tp_rate)),
        fp_gap: max_gap(rates.iter().filter_map(|r| r.fp_rate)),
        epsilon: DEFAULT_EPSILON,
        degenerate,
        groups: rates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierScores {
    pub classifier: ClassifierKind,
    pub ber: f64,
    pub sacc: f64,
    pub mi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionReport {
    pub ber: f64,
    pub sacc: f64,
    pub mi: f64,
    pub variant: Variant,
    pub per_classifier: Vec<ClassifierScores>,
}

/// Trains every classifier to predict the group on `train` and scores it on
/// `test`. The report keeps the worst case: lowest BER, highest SAcc and
/// highest MI.
pub fn protection_report(
    kinds: &[ClassifierKind],
    train: &EncodedMatrix,
    test: &EncodedMatrix,
    variant: Variant,
    seed: u64,
) -> Result<ProtectionReport, MetricsError> {
    if kinds.is_empty() {
        return Err(MetricsError::NoClassifiers);
    }
    let k = train.k;
    let per_classifier = kinds
        .par_iter()
        .map(|&kind| -> Result<ClassifierScores, MetricsError> {
            let mut c = ExternalClassifier::new(kind, crate::rng::derive_seed(seed, kind.name()));
            c.fit(&train.values, &train.groups, k)?;
            let preds = c.predict(&test.values)?;
            Ok(ClassifierScores {
                classifier: kind,
                ber: ber_hard(&preds, &test.groups, k)?,
                sacc: sacc(&preds, &test.groups),
                mi: mi_discrete(&preds, &test.groups),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    for s in &per_classifier {
        log::debug!(
            "{} {}: ber {:.4} sacc {:.4} mi {:.4}",
            variant.name(),
            s.classifier,
            s.ber,
            s.sacc,
            s.mi
        );
    }
    Ok(ProtectionReport {
        ber: per_classifier.iter().map(|s| s.ber).fold(f64::INFINITY, f64::min),
        sacc: per_classifier.iter().map(|s| s.sacc).fold(f64::NEG_INFINITY, f64::max),
        mi: per_classifier.iter().map(|s| s.mi).fold(f64::NEG_INFINITY, f64::max),
        variant,
        per_classifier,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformationReport {
    /// Worst case over classifiers, i.e. the lowest rate.
    pub pc: f64,
    pub scope: RowScope,
    pub per_classifier: Vec<(ClassifierKind, f64)>,
}

/// Trains each classifier on `original` to predict the group and measures
/// how many scoped rows of `transformed` it assigns to the privileged group.
pub fn transformation_report(
    kinds: &[ClassifierKind],
    original: &EncodedMatrix,
    transformed: &EncodedMatrix,
    scope: RowScope,
    seed: u64,
) -> Result<TransformationReport, MetricsError> {
    if kinds.is_empty() {
        return Err(MetricsError::NoClassifiers);
    }
    let rows = scope.rows(&transformed.groups);
    if rows.is_empty() {
        return Err(MetricsError::EmptyScope(scope));
    }
    let scoped = transformed.values.select(Axis(0), &rows);
    let per_classifier = kinds
        .par_iter()
        .map(|&kind| -> Result<(ClassifierKind, f64), MetricsError> {
            let mut c = ExternalClassifier::new(kind, crate::rng::derive_seed(seed, kind.name()));
            c.fit(&original.values, &original.groups, original.k)?;
            let preds = c.predict(&scoped)?;
            Ok((
                kind,
                preds.iter().filter(|&&p| p == PRIVILEGED).count() as f64 / preds.len() as f64,
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TransformationReport {
        pc: per_classifier.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        scope,
        per_classifier,
    })
}

/// One flat export row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub scope: String,
    pub variant: String,
    pub value: f64,
    pub classifier: String,
}

impl ProtectionReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut out = Vec::new();
        for (name, value, pick) in [
            ("ber", self.ber, "min"),
            ("sacc", self.sacc, "max"),
            ("mi", self.mi, "max"),
        ] {
            out.push(MetricRow {
                metric: name.into(),
                scope: "all".into(),
                variant: self.variant.name().into(),
                value,
                classifier: format!("worst({pick})"),
            });
        }
        for s in &self.per_classifier {
            for (name, value) in [("ber", s.ber), ("sacc", s.sacc), ("mi", s.mi)] {
                out.push(MetricRow {
                    metric: name.into(),
                    scope: "all".into(),
                    variant: self.variant.name().into(),
                    value,
                    classifier: s.classifier.name().into(),
                });
            }
        }
        out
    }
}
