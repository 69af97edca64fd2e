//! External classifiers used to audit transformed data.
//!
//! They are trained from scratch on whatever matrix they are handed and know
//! nothing about the mapping. Hyperparameters live in [`defaults`].

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::argmax;
use crate::nn::{sigmoid, Activation, DenseNet, NnError, OptimizerState};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("classifier used before fitting")]
    NotFitted,
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Gbc,
    SvmLinear,
    Dtree,
    Logistic,
    Mlp,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 5] = [
        ClassifierKind::Gbc,
        ClassifierKind::SvmLinear,
        ClassifierKind::Dtree,
        ClassifierKind::Logistic,
        ClassifierKind::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Gbc => "gbc",
            ClassifierKind::SvmLinear => "svm_linear",
            ClassifierKind::Dtree => "dtree",
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::Mlp => "mlp",
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown classifier `{s}`"))
    }
}

/// Frozen hyperparameters.
pub mod defaults {
    pub const GBC_ESTIMATORS: usize = 100;
    pub const GBC_LEARNING_RATE: f64 = 0.1;
    pub const GBC_MAX_DEPTH: usize = 3;

    pub const MLP_HIDDEN: usize = 100;
    pub const MLP_LEARNING_RATE: f64 = 1e-3;
    pub const MLP_EPOCHS: usize = 200;
    pub const MLP_BATCH: usize = 200;
    pub const MLP_ALPHA: f64 = 1e-4;
    /// Stop once the training loss fails to drop by this much ...
    pub const MLP_TOL: f64 = 1e-4;
    /// ... for this many consecutive epochs.
    pub const MLP_PATIENCE: usize = 10;

    pub const LOGISTIC_LEARNING_RATE: f64 = 1.0;
    pub const LOGISTIC_ITERS: usize = 500;
    pub const LOGISTIC_ALPHA: f64 = 1e-4;

    /// Regularisation is `1 / (C * n)` with `C = 1`.
    pub const SVM_C: f64 = 1.0;
    pub const SVM_EPOCHS: usize = 20;
    pub const PLATT_ITERS: usize = 100;
}

/// A node of a binary decision tree; `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_value(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { value } => return value,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }
}

/// Sufficient statistics for split search.
trait SplitStats: Clone {
    fn add(&mut self, row: usize);
    fn remove(&mut self, row: usize);
    fn count(&self) -> usize;
    /// Impurity multiplied by the number of rows.
    fn weighted_impurity(&self) -> f64;
    fn is_pure(&self) -> bool;
}

#[derive(Clone)]
struct ClassStats<'a> {
    y: &'a [usize],
    counts: Vec<usize>,
    n: usize,
}

impl SplitStats for ClassStats<'_> {
    fn add(&mut self, row: usize) {
        self.counts[self.y[row]] += 1;
        self.n += 1;
    }
    fn remove(&mut self, row: usize) {
        self.counts[self.y[row]] -= 1;
        self.n -= 1;
    }
    fn count(&self) -> usize {
        self.n
    }
    fn weighted_impurity(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let n = self.n as f64;
        let sq: f64 = self.counts.iter().map(|&c| (c as f64) * (c as f64)).sum();
        n - sq / n
    }
    fn is_pure(&self) -> bool {
        self.counts.iter().filter(|&&c| c > 0).count() <= 1
    }
}

#[derive(Clone)]
struct RegStats<'a> {
    y: &'a [f64],
    sum: f64,
    sum_sq: f64,
    n: usize,
}

impl SplitStats for RegStats<'_> {
    fn add(&mut self, row: usize) {
        self.sum += self.y[row];
        self.sum_sq += self.y[row] * self.y[row];
        self.n += 1;
    }
    fn remove(&mut self, row: usize) {
        self.sum -= self.y[row];
        self.sum_sq -= self.y[row] * self.y[row];
        self.n -= 1;
    }
    fn count(&self) -> usize {
        self.n
    }
    fn weighted_impurity(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (self.sum_sq - self.sum * self.sum / self.n as f64).max(0.0)
    }
    fn is_pure(&self) -> bool {
        self.weighted_impurity() <= 1e-24
    }
}

struct Builder<'a, S, L> {
    x: &'a Array2<f64>,
    empty: S,
    leaf: L,
    max_depth: Option<usize>,
    nodes: Vec<Node>,
}

impl<S: SplitStats, L: Fn(&[usize]) -> Vec<f64>> Builder<'_, S, L> {
    fn stats(&self, rows: &[usize]) -> S {
        let mut s = self.empty.clone();
        for &r in rows {
            s.add(r);
        }
        s
    }

    /// Best `(gain, feature, threshold)`; the first candidate wins ties.
    fn best_split(&self, rows: &[usize], parent: &S) -> Option<(f64, usize, f64)> {
        let parent_imp = parent.weighted_impurity();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for f in 0..self.x.ncols() {
            let col = self.x.column(f);
            sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            let mut left = self.empty.clone();
            let mut right = parent.clone();
            for i in 0..sorted.len() - 1 {
                left.add(sorted[i]);
                right.remove(sorted[i]);
                let (a, b) = (col[sorted[i]], col[sorted[i + 1]]);
                if a == b {
                    continue;
                }
                let gain = parent_imp - left.weighted_impurity() - right.weighted_impurity();
                if gain > -1e-12 && best.is_none_or(|(g, _, _)| gain > g + 1e-12) {
                    let mut thr = 0.5 * (a + b);
                    if thr >= b {
                        thr = a;
                    }
                    best = Some((gain, f, thr));
                }
            }
        }
        best
    }

    fn build(&mut self, rows: &[usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: Vec::new() });
        let stats = self.stats(rows);
        let can_split = stats.count() >= 2
            && !stats.is_pure()
            && self.max_depth.is_none_or(|d| depth < d);
        let split = if can_split {
            self.best_split(rows, &stats)
        } else {
            None
        };
        match split {
            Some((_, feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows
                    .iter()
                    .partition(|&&row| self.x[[row, feature]] <= threshold);
                let left = self.build(&l, depth + 1);
                let right = self.build(&r, depth + 1);
                self.nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
            None => {
                self.nodes[id] = Node::Leaf {
                    value: (self.leaf)(rows),
                };
            }
        }
        id
    }
}

/// Gini CART classification tree; leaves hold class frequencies.
pub fn fit_classification_tree(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    max_depth: Option<usize>,
) -> Tree {
    let leaf = |rows: &[usize]| {
        let mut v = vec![0.0; n_classes];
        for &r in rows {
            v[y[r]] += 1.0;
        }
        let n = rows.len().max(1) as f64;
        v.iter_mut().for_each(|p| *p /= n);
        v
    };
    let mut b = Builder {
        x,
        empty: ClassStats {
            y,
            counts: vec![0; n_classes],
            n: 0,
        },
        leaf,
        max_depth,
        nodes: Vec::new(),
    };
    let rows: Vec<usize> = (0..x.nrows()).collect();
    b.build(&rows, 0);
    Tree { nodes: b.nodes }
}

/// Squared-error regression tree with caller-supplied leaf values.
fn fit_regression_tree<L: Fn(&[usize]) -> Vec<f64>>(
    x: &Array2<f64>,
    target: &[f64],
    max_depth: usize,
    leaf: L,
) -> Tree {
    let mut b = Builder {
        x,
        empty: RegStats {
            y: target,
            sum: 0.0,
            sum_sq: 0.0,
            n: 0,
        },
        leaf,
        max_depth: Some(max_depth),
        nodes: Vec::new(),
    };
    let rows: Vec<usize> = (0..x.nrows()).collect();
    b.build(&rows, 0);
    Tree { nodes: b.nodes }
}

/// Binary log-loss booster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Booster {
    pub init: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl Booster {
    fn fit(x: &Array2<f64>, y: &[bool], rounds: usize, lr: f64, depth: usize) -> Self {
        let n = y.len() as f64;
        let pos = y.iter().filter(|&&b| b).count() as f64;
        let p0 = (pos / n).clamp(1e-12, 1.0 - 1e-12);
        let init = (p0 / (1.0 - p0)).ln();
        let mut f = vec![init; y.len()];
        let mut trees = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let p: Vec<f64> = f.iter().map(|&v| sigmoid(v)).collect();
            let resid: Vec<f64> = y
                .iter()
                .zip(&p)
                .map(|(&t, &pi)| f64::from(u8::from(t)) - pi)
                .collect();
            let leaf = |rows: &[usize]| {
                let num: f64 = rows.iter().map(|&r| resid[r]).sum();
                let den: f64 = rows.iter().map(|&r| p[r] * (1.0 - p[r])).sum();
                vec![if den.abs() < 1e-150 { 0.0 } else { num / den }]
            };
            let tree = fit_regression_tree(x, &resid, depth, leaf);
            for (r, fr) in f.iter_mut().enumerate() {
                let row = x.row(r);
                *fr += lr * tree.leaf_value(row.as_slice().expect("contiguous"))[0];
            }
            trees.push(tree);
        }
        Self {
            init,
            learning_rate: lr,
            trees,
        }
    }

    /// Raw score after the first `rounds` trees.
    pub fn staged_score(&self, x: &[f64], rounds: usize) -> f64 {
        self.init
            + self.trees[..rounds.min(self.trees.len())]
                .iter()
                .map(|t| self.learning_rate * t.leaf_value(x)[0])
                .sum::<f64>()
    }
}

/// Gradient boosting: one booster for two classes, one per class otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbc {
    pub boosters: Vec<Booster>,
}

impl Gbc {
    fn proba_staged(&self, x: &[f64], n_classes: usize, rounds: usize) -> Vec<f64> {
        if self.boosters.len() == 1 {
            let p1 = sigmoid(self.boosters[0].staged_score(x, rounds));
            let mut v = vec![0.0; n_classes];
            v[0] = 1.0 - p1;
            v[1] = p1;
            v
        } else {
            normalized(
                self.boosters
                    .iter()
                    .map(|b| sigmoid(b.staged_score(x, rounds)))
                    .collect(),
            )
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 && s.is_finite() {
        v.iter_mut().for_each(|p| *p /= s);
    } else {
        let u = 1.0 / v.len() as f64;
        v.iter_mut().for_each(|p| *p = u);
    }
    v
}

/// Linear SVM with Platt-scaled margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    /// One `(weights, bias, platt_a, platt_b)` per binary problem.
    pub machines: Vec<(Vec<f64>, f64, f64, f64)>,
}

impl LinearSvm {
    fn fit(x: &Array2<f64>, y: &[usize], n_classes: usize, seed: u64) -> Self {
        let problems: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
        let machines = problems
            .into_iter()
            .map(|c| {
                let t: Vec<bool> = y.iter().map(|&l| l == c).collect();
                let (w, b) = pegasos(x, &t, crate::rng::derive_seed(seed, &format!("svm/{c}")));
                let margins: Vec<f64> = (0..x.nrows())
                    .map(|r| x.row(r).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b)
                    .collect();
                let (pa, pb) = platt(&margins, &t);
                (w, b, pa, pb)
            })
            .collect();
        Self { machines }
    }

    fn proba(&self, x: &[f64], n_classes: usize) -> Vec<f64> {
        let scores: Vec<f64> = self
            .machines
            .iter()
            .map(|(w, b, pa, pb)| {
                let m = x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
                sigmoid(pa * m + pb)
            })
            .collect();
        if n_classes == 2 {
            vec![1.0 - scores[0], scores[0]]
        } else {
            normalized(scores)
        }
    }
}

/// Pegasos stochastic subgradient descent on the hinge loss. The bias is an
/// extra constant feature.
fn pegasos(x: &Array2<f64>, t: &[bool], seed: u64) -> (Vec<f64>, f64) {
    let n = x.nrows();
    let m = x.ncols();
    let lambda = 1.0 / (defaults::SVM_C * n as f64);
    let mut w = vec![0.0; m + 1];
    let mut avg = vec![0.0; m + 1];
    let mut rng = crate::rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let total = defaults::SVM_EPOCHS * n;
    let radius = 1.0 / lambda.sqrt();
    for _ in 0..defaults::SVM_EPOCHS {
        order.shuffle(&mut rng);
        for &r in &order {
            step += 1;
            let eta = 1.0 / (lambda * step as f64);
            let yv = if t[r] { 1.0 } else { -1.0 };
            let row = x.row(r);
            let margin = yv * (row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[m]);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wi, &xi) in w.iter_mut().zip(row.iter()) {
                    *wi += eta * yv * xi;
                }
                w[m] += eta * yv;
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                w.iter_mut().for_each(|v| *v *= radius / norm);
            }
            // Average over the second half of the run.
            if step > total / 2 {
                for (a, v) in avg.iter_mut().zip(&w) {
                    *a += v;
                }
            }
        }
    }
    let count = (total - total / 2).max(1) as f64;
    avg.iter_mut().for_each(|a| *a /= count);
    let b = avg.pop().expect("bias");
    (avg, b)
}

/// Platt scaling with the usual target smoothing, by Newton's method.
fn platt(margins: &[f64], t: &[bool]) -> (f64, f64) {
    let n_pos = t.iter().filter(|&&b| b).count() as f64;
    let n_neg = t.len() as f64 - n_pos;
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let target: Vec<f64> = t.iter().map(|&b| if b { hi } else { lo }).collect();
    let loss = |a: f64, b: f64| -> f64 {
        margins
            .iter()
            .zip(&target)
            .map(|(&f, &y)| {
                let z = a * f + b;
                // log(1 + e^z) - y z, stable
                let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                softplus - y * z
            })
            .sum()
    };
    let (mut a, mut b) = (1.0, -((n_neg + 1.0) / (n_pos + 1.0)).ln());
    let mut cur = loss(a, b);
    for _ in 0..defaults::PLATT_ITERS {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-12, 0.0, 1e-12);
        for (&f, &y) in margins.iter().zip(&target) {
            let p = sigmoid(a * f + b);
            let d = p - y;
            let w = p * (1.0 - p);
            ga += d * f;
            gb += d;
            haa += w * f * f;
            hab += w * f;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-300 {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-10 {
            let (na, nb) = (a - step * da, b - step * db);
            let l = loss(na, nb);
            if l < cur {
                a = na;
                b = nb;
                improved = cur - l > 1e-12 * cur.abs().max(1.0);
                cur = l;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq)]
enum Fitted {
    Net(DenseNet),
    Tree(Tree),
    Gbc(Gbc),
    Svm(LinearSvm),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalClassifier {
    pub kind: ClassifierKind,
    pub seed: u64,
    n_classes: usize,
    state: Option<Fitted>,
}

impl ExternalClassifier {
    pub fn new(kind: ClassifierKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            n_classes: 0,
            state: None,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn is_fitted(&self) -> bool {
        self.state.is_some()
    }

    /// Fits on `x` with labels in `0..n_classes`.
    pub fn fit(&mut self, x: &Array2<f64>, y: &[usize], n_classes: usize) -> Result<(), ClassifierError> {
        if x.nrows() != y.len() {
            return Err(ClassifierError::ShapeMismatch(format!(
                "{} rows for {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(&label) = y.iter().find(|&&l| l >= n_classes) {
            return Err(ClassifierError::LabelOutOfRange { label, n_classes });
        }
        if y.is_empty() || y.iter().all(|&l| l == y[0]) {
            return Err(ClassifierError::SingleClass);
        }
        self.n_classes = n_classes;
        let seed = self.seed;
        self.state = Some(match self.kind {
            ClassifierKind::Logistic => Fitted::Net(fit_logistic(x, y, n_classes, seed)?),
            ClassifierKind::Mlp => Fitted::Net(fit_mlp(x, y, n_classes, seed)?),
            ClassifierKind::Dtree => Fitted::Tree(fit_classification_tree(x, y, n_classes, None)),
            ClassifierKind::Gbc => {
                let problems: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
                Fitted::Gbc(Gbc {
                    boosters: problems
                        .into_iter()
                        .map(|c| {
                            let t: Vec<bool> = y.iter().map(|&l| l == c).collect();
                            Booster::fit(
                                x,
                                &t,
                                defaults::GBC_ESTIMATORS,
                                defaults::GBC_LEARNING_RATE,
                                defaults::GBC_MAX_DEPTH,
                            )
                        })
                        .collect(),
                })
            }
            ClassifierKind::SvmLinear => Fitted::Svm(LinearSvm::fit(x, y, n_classes, seed)),
        });
        Ok(())
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Result<Array2<f64>, ClassifierError> {
        let state = self.state.as_ref().ok_or(ClassifierError::NotFitted)?;
        let k = self.n_classes;
        let rows = |f: &dyn Fn(&[f64]) -> Vec<f64>| -> Array2<f64> {
            let mut out = Array2::zeros((x.nrows(), k));
            for (r, row) in x.rows().into_iter().enumerate() {
                let v = f(&row.to_vec());
                out.row_mut(r).assign(&Array1::from(v));
            }
            out
        };
        match state {
            Fitted::Net(net) => {
                if x.ncols() != net.input_width() {
                    return Err(ClassifierError::ShapeMismatch(format!(
                        "{} columns, fitted on {}",
                        x.ncols(),
                        net.input_width()
                    )));
                }
                if x.nrows() == 0 {
                    return Ok(Array2::zeros((0, k)));
                }
                Ok(net.forward(x)?)
            }
            Fitted::Tree(t) => Ok(rows(&|r| t.leaf_value(r).to_vec())),
            Fitted::Gbc(g) => Ok(rows(&|r| g.proba_staged(r, k, usize::MAX))),
            Fitted::Svm(s) => Ok(rows(&|r| s.proba(r, k))),
        }
    }

    /// Arg-max of [`Self::predict_proba`]; the lowest class wins ties.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<usize>, ClassifierError> {
        let p = self.predict_proba(x)?;
        Ok(p.rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("contiguous")))
            .collect())
    }

    /// Mean training log-loss after each boosting round (gbc only).
    pub fn staged_log_loss(&self, x: &Array2<f64>, y: &[usize]) -> Option<Vec<f64>> {
        let Some(Fitted::Gbc(g)) = &self.state else {
            return None;
        };
        let rounds = g.boosters[0].trees.len();
        Some(
            (0..=rounds)
                .map(|t| {
                    let s: f64 = x
                        .rows()
                        .into_iter()
                        .zip(y)
                        .map(|(row, &l)| {
                            let p = g.proba_staged(&row.to_vec(), self.n_classes, t)[l];
                            -p.max(1e-300).ln()
                        })
                        .sum();
                    s / y.len() as f64
                })
                .collect(),
        )
    }

    /// Networks are stored as nn checkpoints, trees and boosters as JSON.
    pub fn save(&self, stem: &Path) -> Result<(), ClassifierError> {
        let state = self.state.as_ref().ok_or(ClassifierError::NotFitted)?;
        let meta = SavedMeta {
            kind: self.kind,
            seed: self.seed,
            n_classes: self.n_classes,
        };
        std::fs::write(with_suffix(stem, ".meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        match state {
            Fitted::Net(net) => net.save(stem)?,
            Fitted::Tree(t) => std::fs::write(with_suffix(stem, ".json"), serde_json::to_vec(t)?)?,
            Fitted::Gbc(g) => std::fs::write(with_suffix(stem, ".json"), serde_json::to_vec(g)?)?,
            Fitted::Svm(s) => std::fs::write(with_suffix(stem, ".json"), serde_json::to_vec(s)?)?,
        }
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, ClassifierError> {
        let meta: SavedMeta = serde_json::from_slice(&std::fs::read(with_suffix(stem, ".meta.json"))?)?;
        let body = || std::fs::read(with_suffix(stem, ".json"));
        let state = match meta.kind {
            ClassifierKind::Logistic | ClassifierKind::Mlp => Fitted::Net(DenseNet::load(stem)?),
            ClassifierKind::Dtree => Fitted::Tree(serde_json::from_slice(&body()?)?),
            ClassifierKind::Gbc => Fitted::Gbc(serde_json::from_slice(&body()?)?),
            ClassifierKind::SvmLinear => Fitted::Svm(serde_json::from_slice(&body()?)?),
        };
        Ok(Self {
            kind: meta.kind,
            seed: meta.seed,
            n_classes: meta.n_classes,
            state: Some(state),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SavedMeta {
    kind: ClassifierKind,
    seed: u64,
    n_classes: usize,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Cross-entropy gradient with respect to softmax outputs, plus the loss.
fn cross_entropy(probs: &Array2<f64>, y: &[usize]) -> (f64, Array2<f64>) {
    let n = y.len() as f64;
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut loss = 0.0;
    for (r, &l) in y.iter().enumerate() {
        let p = probs[[r, l]].max(1e-15);
        loss -= p.ln() / n;
        grad[[r, l]] = -1.0 / (n * p);
    }
    (loss, grad)
}

fn add_l2(grads: &mut crate::nn::Gradients, net: &DenseNet, alpha: f64, n: f64) {
    for (g, l) in grads.layers.iter_mut().zip(net.layers()) {
        g.weights.scaled_add(alpha / n, &l.weights);
    }
}

fn fit_logistic(x: &Array2<f64>, y: &[usize], k: usize, seed: u64) -> Result<DenseNet, ClassifierError> {
    let mut net = DenseNet::new(&[x.ncols(), k], &[Activation::Softmax], seed)?;
    for l in net.layers_mut() {
        l.weights.fill(0.0);
        l.bias.fill(0.0);
    }
    let mut opt = OptimizerState::sgd(defaults::LOGISTIC_LEARNING_RATE, &net);
    let n = x.nrows() as f64;
    for _ in 0..defaults::LOGISTIC_ITERS {
        let trace = net.forward_trace(x)?;
        let (_, dout) = cross_entropy(trace.output(), y);
        let mut bp = net.backward(&trace, &dout)?;
        add_l2(&mut bp.grads, &net, defaults::LOGISTIC_ALPHA, n);
        opt.step(&mut net, &bp.grads);
    }
    Ok(net)
}

fn fit_mlp(x: &Array2<f64>, y: &[usize], k: usize, seed: u64) -> Result<DenseNet, ClassifierError> {
    let mut net = DenseNet::new(
        &[x.ncols(), defaults::MLP_HIDDEN, k],
        &[Activation::Relu, Activation::Softmax],
        seed,
    )?;
    let mut opt = OptimizerState::adam(defaults::MLP_LEARNING_RATE, &net);
    let mut rng = crate::rng::stream(seed, "mlp/batching");
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let n = x.nrows() as f64;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..defaults::MLP_EPOCHS {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(defaults::MLP_BATCH) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&r| y[r]).collect();
            let trace = net.forward_trace(&xb)?;
            let (loss, dout) = cross_entropy(trace.output(), &yb);
            epoch_loss += loss * chunk.len() as f64 / n;
            let mut bp = net.backward(&trace, &dout)?;
            add_l2(&mut bp.grads, &net, defaults::MLP_ALPHA, chunk.len() as f64);
            opt.step(&mut net, &bp.grads);
        }
        if epoch_loss > best - defaults::MLP_TOL {
            stale += 1;
            if stale >= defaults::MLP_PATIENCE {
                break;
            }
        } else {
            stale = 0;
        }
        best = best.min(epoch_loss);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn xor() -> (Array2<f64>, Vec<usize>) {
        (
            array![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]],
            vec![0, 1, 1, 0],
        )
    }

    #[test]
    fn dtree_solves_xor_with_pure_leaves() {
        let (x, y) = xor();
        let mut c = ExternalClassifier::new(ClassifierKind::Dtree, 0);
        c.fit(&x, &y, 2).unwrap();
        assert_eq!(c.predict(&x).unwrap(), y);
        let p = c.predict_proba(&x).unwrap();
        assert!(p.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn single_class_is_rejected() {
        let x = array![[0.0], [1.0]];
        for kind in ClassifierKind::ALL {
            let mut c = ExternalClassifier::new(kind, 0);
            assert!(matches!(c.fit(&x, &[1, 1], 2), Err(ClassifierError::SingleClass)));
        }
    }

    #[test]
    fn unfitted_prediction_fails() {
        let c = ExternalClassifier::new(ClassifierKind::Logistic, 0);
        assert!(matches!(
            c.predict(&array![[0.0]]),
            Err(ClassifierError::NotFitted)
        ));
    }

    #[test]
    fn kinds_parse_by_name() {
        for k in ClassifierKind::ALL {
            assert_eq!(k.name().parse::<ClassifierKind>().unwrap(), k);
        }
        assert!("svm".parse::<ClassifierKind>().is_err());
    }
}
