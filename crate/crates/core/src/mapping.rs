//! Adversarial training of the group mapping.
//!
//! Four networks take part. The generator `G` maps feature rows (the encoded
//! record without the decision column) into the same space. A frozen
//! classifier `C`, pretrained on original data, scores how privileged a
//! mapped row looks. A discriminator `D` and a critic share a trunk: `D`
//! predicts the group, the critic scores distance to the privileged rows.
//!
//! Every loss is exposed as a free function returning its value and the
//! gradient with respect to the network output it consumes, so the same code
//! drives training and gradient verification.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{holdout_split, DataError, Dataset, EncodedMatrix, Encoder};
use crate::nn::{Activation, DenseNet, Gradients, NnError, OptimizerState};
use crate::PRIVILEGED;

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("non-finite {term} loss at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        term: String,
        /// Ensemble as it stood after the last completed epoch.
        last_good: Option<Box<MappingEnsemble>>,
    },
    #[error("mode {mode:?} requires {field} = 0, got {value}")]
    ModeConflict {
        mode: Mode,
        field: &'static str,
        value: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("probability rows must sum to 1 (row {row} sums to {sum})")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("need at least two groups, found {0}")]
    TooFewGroups(usize),
    #[error("empty input for {0}")]
    EmptyInput(&'static str),
    #[error("encoder does not match: {0}")]
    EncoderMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coefficients of the generator and discriminator objectives.
///
/// The alternative names `lambda_r`, `lambda_dstd` and `lambda_big_d` are
/// accepted on input for `lambda_rec`, `lambda_gan` and `lambda_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    #[serde(alias = "lambda_r")]
    pub lambda_rec: f64,
    pub lambda_c: f64,
    #[serde(alias = "lambda_dstd")]
    pub lambda_gan: f64,
    #[serde(alias = "lambda_big_d")]
    pub lambda_d: f64,
    pub lambda_d_mi: f64,
    pub lambda_g_mi: f64,
    pub lambda_dstd_gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_c: 1.0,
            lambda_gan: 1.0,
            lambda_d: 1.0,
            lambda_d_mi: 1.0,
            lambda_g_mi: 1.0,
            lambda_dstd_gan: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_rec: 0.0,
            lambda_c: 0.0,
            lambda_gan: 0.0,
            lambda_d: 0.0,
            lambda_d_mi: 0.0,
            lambda_g_mi: 0.0,
            lambda_dstd_gan: 0.0,
        }
    }

    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("lambda_rec", self.lambda_rec),
            ("lambda_c", self.lambda_c),
            ("lambda_gan", self.lambda_gan),
            ("lambda_d", self.lambda_d),
            ("lambda_d_mi", self.lambda_d_mi),
            ("lambda_g_mi", self.lambda_g_mi),
            ("lambda_dstd_gan", self.lambda_dstd_gan),
        ]
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(MappingError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectionLoss {
    Ber,
    Acc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fairmapping,
    Wgan,
    Attgan,
    Gansan,
    GansanOm,
}

impl Mode {
    /// Rows the reconstruction loss compares against their images.
    fn recons_scope(self) -> Scope {
        match self {
            Mode::Fairmapping | Mode::Wgan => Scope::Privileged,
            Mode::Attgan | Mode::Gansan => Scope::All,
            Mode::GansanOm => Scope::Protected,
        }
    }

    /// Whether the discriminator sees mapped privileged rows.
    fn maps_privileged_for_d(self) -> bool {
        self == Mode::Gansan
    }

    fn protection_sign(self) -> f64 {
        if self == Mode::Attgan {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scope {
    All,
    Privileged,
    Protected,
}

impl Scope {
    fn contains(self, group: usize) -> bool {
        match self {
            Scope::All => true,
            Scope::Privileged => group == PRIVILEGED,
            Scope::Protected => group != PRIVILEGED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub critic_steps: usize,
    pub clip_c: f64,
    pub seed: u64,
    pub protection_loss: ProtectionLoss,
    pub use_mi: bool,
    pub mode: Mode,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    /// Hidden width of the generator; `None` means twice the feature width.
    pub generator_width: Option<usize>,
    pub hidden_width: usize,
    pub classifier_epochs: usize,
    pub classifier_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            critic_steps: 5,
            clip_c: 0.01,
            seed: 0,
            protection_loss: ProtectionLoss::Ber,
            use_mi: true,
            mode: Mode::Fairmapping,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            critic_learning_rate: 5e-5,
            generator_width: None,
            hidden_width: 64,
            classifier_epochs: 200,
            classifier_patience: 10,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against the number of groups `k`.
    pub fn validate(&self, k: usize) -> Result<(), MappingError> {
        if k < 2 {
            return Err(MappingError::TooFewGroups(k));
        }
        self.weights.validate()?;
        let w = &self.weights;
        let forced_zero: &[(&'static str, f64)] = match self.mode {
            Mode::Wgan => &[
                ("lambda_rec", w.lambda_rec),
                ("lambda_c", w.lambda_c),
                ("lambda_d", w.lambda_d),
            ],
            Mode::Gansan | Mode::GansanOm => {
                &[("lambda_c", w.lambda_c), ("lambda_gan", w.lambda_gan)]
            }
            Mode::Fairmapping | Mode::Attgan => &[],
        };
        for &(field, value) in forced_zero {
            if value != 0.0 {
                return Err(MappingError::ModeConflict {
                    mode: self.mode,
                    field,
                    value,
                });
            }
        }
        if self.batch_size == 0 || self.critic_steps == 0 || self.hidden_width == 0 {
            return Err(MappingError::InvalidConfig(
                "batch_size, critic_steps and hidden_width must be positive".into(),
            ));
        }
        if !(self.clip_c > 0.0) || !(self.learning_rate > 0.0) || !(self.critic_learning_rate > 0.0)
        {
            return Err(MappingError::InvalidConfig(
                "clip_c and learning rates must be positive".into(),
            ));
        }
        if k > 2 && !self.use_mi {
            return Err(MappingError::InvalidConfig(
                "the MI regularizer is required with more than two groups".into(),
            ));
        }
        if k == 2 && self.protection_loss == ProtectionLoss::Acc && !self.use_mi {
            return Err(MappingError::InvalidConfig(
                "accuracy protection on two groups needs use_mi: zero accuracy just inverts the prediction"
                    .into(),
            ));
        }
        Ok(())
    }

    /// A copy with the weights forced to the mode's fixed values.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        match self.mode {
            Mode::Wgan => {
                out.weights.lambda_rec = 0.0;
                out.weights.lambda_c = 0.0;
                out.weights.lambda_d = 0.0;
            }
            Mode::Gansan | Mode::GansanOm => {
                out.weights.lambda_c = 0.0;
                out.weights.lambda_gan = 0.0;
            }
            Mode::Fairmapping | Mode::Attgan => {}
        }
        if !out.use_mi {
            out.weights.lambda_d_mi = 0.0;
            out.weights.lambda_g_mi = 0.0;
        }
        out
    }
}

/// A loss value and its gradient with respect to the consumed output.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Mean absolute difference over every element.
pub fn loss_recons(original: &Array2<f64>, mapped: &Array2<f64>) -> Result<LossGrad, MappingError> {
    if original.is_empty() {
        return Err(MappingError::EmptyInput("reconstruction"));
    }
    if original.dim() != mapped.dim() {
        return Err(MappingError::Nn(NnError::ShapeMismatch {
            expected: format!("{:?}", original.dim()),
            found: format!("{:?}", mapped.dim()),
        }));
    }
    let n = original.len() as f64;
    let diff = mapped - original;
    let value = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    let grad = diff.mapv(|d| {
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    });
    Ok(LossGrad { value, grad })
}

/// Mean probability that `C` assigns to the privileged group.
pub fn loss_c(probs: &Array2<f64>) -> Result<LossGrad, MappingError> {
    if probs.nrows() == 0 {
        return Err(MappingError::EmptyInput("classifier term"));
    }
    let n = probs.nrows() as f64;
    let value = probs.column(PRIVILEGED).sum() / n;
    let mut grad = Array2::zeros(probs.raw_dim());
    grad.column_mut(PRIVILEGED).fill(1.0 / n);
    Ok(LossGrad { value, grad })
}

/// Generator side of the critic: minus the mean score of mapped rows.
pub fn loss_gan(scores: &Array2<f64>) -> Result<LossGrad, MappingError> {
    if scores.nrows() == 0 {
        return Err(MappingError::EmptyInput("adversarial term"));
    }
    let n = scores.nrows() as f64;
    Ok(LossGrad {
        value: -scores.sum() / n,
        grad: Array2::from_elem(scores.raw_dim(), -1.0 / n),
    })
}

/// Mean critic score of privileged rows minus that of the other rows.
pub fn critic_distance(scores: &Array2<f64>, groups: &[usize]) -> Result<LossGrad, MappingError> {
    let n_priv = groups.iter().filter(|&&g| g == PRIVILEGED).count();
    let n_prot = groups.len() - n_priv;
    if n_priv == 0 || n_prot == 0 {
        return Err(MappingError::EmptyInput("critic distance"));
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros(scores.raw_dim());
    for (r, &g) in groups.iter().enumerate() {
        let w = if g == PRIVILEGED {
            1.0 / n_priv as f64
        } else {
            -1.0 / n_prot as f64
        };
        value += w * scores[[r, 0]];
        grad[[r, 0]] = w;
    }
    Ok(LossGrad { value, grad })
}

/// Per-group mean of the probability given to the true group, for groups
/// present in `groups`. Returns `(group, mean, size)` triples.
fn group_correct_means(probs: &Array2<f64>, groups: &[usize]) -> Vec<(usize, f64, usize)> {
    let k = probs.ncols();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (r, &g) in groups.iter().enumerate() {
        sums[g] += probs[[r, g]];
        counts[g] += 1;
    }
    (0..k)
        .filter(|&g| counts[g] > 0)
        .map(|g| (g, sums[g] / counts[g] as f64, counts[g]))
        .collect()
}

fn check_labels(probs: &Array2<f64>, groups: &[usize]) -> Result<(), MappingError> {
    if probs.nrows() == 0 {
        return Err(MappingError::EmptyInput("group prediction"));
    }
    if probs.nrows() != groups.len() {
        return Err(MappingError::Nn(NnError::ShapeMismatch {
            expected: format!("{} labels", probs.nrows()),
            found: format!("{}", groups.len()),
        }));
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= probs.ncols()) {
        return Err(MappingError::InvalidConfig(format!(
            "group {g} outside {} predicted classes",
            probs.ncols()
        )));
    }
    Ok(())
}

/// Sum over present groups of their mean correct probability, with gradient
/// scaled by `scale`.
fn correct_sum(probs: &Array2<f64>, groups: &[usize], scale: f64) -> (f64, Array2<f64>, usize) {
    let means = group_correct_means(probs, groups);
    let mut sizes = vec![0usize; probs.ncols()];
    for &(g, _, n) in &means {
        sizes[g] = n;
    }
    let mut grad = Array2::zeros(probs.raw_dim());
    for (r, &g) in groups.iter().enumerate() {
        grad[[r, g]] = scale / sizes[g] as f64;
    }
    let total = means.iter().map(|m| m.1).sum::<f64>();
    (total, grad, means.len())
}

/// Discriminator objective: one minus the accuracy, or one minus the mean
/// per-group correct probability.
pub fn loss_discriminator(
    probs: &Array2<f64>,
    groups: &[usize],
    kind: ProtectionLoss,
) -> Result<LossGrad, MappingError> {
    check_labels(probs, groups)?;
    match kind {
        ProtectionLoss::Acc => {
            let n = groups.len() as f64;
            let mut grad = Array2::zeros(probs.raw_dim());
            let mut s = 0.0;
            for (r, &g) in groups.iter().enumerate() {
                s += probs[[r, g]];
                grad[[r, g]] = -1.0 / n;
            }
            Ok(LossGrad {
                value: 1.0 - s / n,
                grad,
            })
        }
        ProtectionLoss::Ber => {
            let present = group_correct_means(probs, groups).len() as f64;
            let (total, grad, _) = correct_sum(probs, groups, -1.0 / present);
            Ok(LossGrad {
                value: 1.0 - total / present,
                grad,
            })
        }
    }
}

/// Generator protection objective. The BER form is zero exactly when the
/// per-group correct means sum to one; the accuracy form is the fraction of
/// correctly attributed probability mass.
pub fn loss_protection(
    probs: &Array2<f64>,
    groups: &[usize],
    kind: ProtectionLoss,
) -> Result<LossGrad, MappingError> {
    check_labels(probs, groups)?;
    match kind {
        ProtectionLoss::Acc => {
            let n = groups.len() as f64;
            let mut grad = Array2::zeros(probs.raw_dim());
            let mut s = 0.0;
            for (r, &g) in groups.iter().enumerate() {
                s += probs[[r, g]];
                grad[[r, g]] = 1.0 / n;
            }
            Ok(LossGrad { value: s / n, grad })
        }
        ProtectionLoss::Ber => {
            let present = group_correct_means(probs, groups).len() as f64;
            let (total, grad, _) = correct_sum(probs, groups, 1.0 / present);
            Ok(LossGrad {
                value: -1.0 / present + total / present,
                grad,
            })
        }
    }
}

/// Mutual information between the true group and the soft prediction, in
/// nats. The joint uses mean predicted probabilities within each group,
/// weighted by the group's share of rows; the predicted marginal is the mean
/// probability over all rows.
pub fn mi_soft(probs: &Array2<f64>, groups: &[usize]) -> Result<LossGrad, MappingError> {
    check_labels(probs, groups)?;
    for (r, row) in probs.rows().into_iter().enumerate() {
        let sum = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MappingError::RowNotNormalized { row: r, sum });
        }
    }
    let n = probs.nrows() as f64;
    let k = probs.ncols();
    // joint[i][j] = P(S=i) * mean_{t in i} p_tj = (1/n) * sum_{t in i} p_tj
    let mut joint = Array2::<f64>::zeros((k, k));
    let mut prior = vec![0.0; k];
    for (r, &g) in groups.iter().enumerate() {
        prior[g] += 1.0 / n;
        for j in 0..k {
            joint[[g, j]] += probs[[r, j]] / n;
        }
    }
    let marginal: Vec<f64> = (0..k).map(|j| joint.column(j).sum()).collect();
    let mut log_ratio = Array2::<f64>::zeros((k, k));
    let mut value = 0.0;
    for i in 0..k {
        for j in 0..k {
            let p = joint[[i, j]];
            if p > 0.0 {
                let lr = (p / (prior[i] * marginal[j])).ln();
                log_ratio[[i, j]] = lr;
                value += p * lr;
            }
        }
    }
    // d MI / d p_tj = log_ratio[g_t][j] / n; the +1 terms cancel between the
    // joint and the marginal.
    let mut grad = Array2::zeros(probs.raw_dim());
    for (r, &g) in groups.iter().enumerate() {
        for j in 0..k {
            grad[[r, j]] = log_ratio[[g, j]] / n;
        }
    }
    Ok(LossGrad {
        value: value.max(0.0),
        grad,
    })
}

/// All networks of a mapping run.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub generator: DenseNet,
    pub classifier: DenseNet,
    pub disc_trunk: DenseNet,
    pub disc_head: DenseNet,
    pub critic_head: DenseNet,
}

impl Networks {
    /// Fresh networks for `m` feature columns and `k` groups. The classifier
    /// is untrained.
    pub fn init(m: usize, k: usize, config: &TrainConfig) -> Result<Self, MappingError> {
        let seed = config.seed;
        let gw = config.generator_width.unwrap_or(2 * m);
        let h = config.hidden_width;
        let s = |name: &str| crate::rng::derive_seed(seed, name);
        Ok(Self {
            generator: DenseNet::new(
                &[m, gw, gw, m],
                &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
                s("init/generator"),
            )?,
            classifier: classifier_net(m, k, h, s("init/classifier"))?,
            disc_trunk: DenseNet::new(
                &[m, h, h],
                &[Activation::Relu, Activation::Relu],
                s("init/disc_trunk"),
            )?,
            disc_head: DenseNet::new(&[h, k], &[Activation::Softmax], s("init/disc_head"))?,
            critic_head: DenseNet::new(&[h, 1], &[Activation::Linear], s("init/critic_head"))?,
        })
    }

    /// `(D probabilities, critic scores)` for the given rows.
    pub fn discriminate(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>), MappingError> {
        let h = self.disc_trunk.forward(x)?;
        Ok((self.disc_head.forward(&h)?, self.critic_head.forward(&h)?))
    }
}

fn classifier_net(m: usize, k: usize, h: usize, seed: u64) -> Result<DenseNet, NnError> {
    DenseNet::new(
        &[m, h, h, k],
        &[Activation::Relu, Activation::Relu, Activation::Softmax],
        seed,
    )
}

/// Individual terms of one generator evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub recons: f64,
    pub l_c: f64,
    pub l_gan: f64,
    pub l_s: f64,
    pub mi: f64,
    pub total: f64,
}

/// Individual terms of one discriminator/critic evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorTerms {
    pub l_d: f64,
    pub mi: f64,
    pub l_dstd: f64,
    pub total: f64,
}

fn scoped_rows(groups: &[usize], scope: Scope) -> Vec<usize> {
    (0..groups.len()).filter(|&r| scope.contains(groups[r])).collect()
}

fn add_rows(target: &mut Array2<f64>, rows: &[usize], src: &Array2<f64>, scale: f64) {
    for (i, &r) in rows.iter().enumerate() {
        target.row_mut(r).scaled_add(scale, &src.row(i));
    }
}

/// Rows the discriminator sees: protected rows are always mapped, privileged
/// rows are mapped only in `gansan` mode.
fn discriminator_input(x: &Array2<f64>, mapped: &Array2<f64>, groups: &[usize], mode: Mode) -> Array2<f64> {
    let mut d_in = x.clone();
    for (r, &g) in groups.iter().enumerate() {
        if g != PRIVILEGED || mode.maps_privileged_for_d() {
            d_in.row_mut(r).assign(&mapped.row(r));
        }
    }
    d_in
}

fn finite(term: &str, v: f64, epoch: usize) -> Result<f64, MappingError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MappingError::NonFiniteLoss {
            epoch,
            term: term.to_string(),
            last_good: None,
        })
    }
}

/// Generator objective on one batch and its gradient for the generator.
///
/// Terms whose coefficient is zero are neither evaluated nor differentiated.
pub fn generator_objective(
    nets: &Networks,
    x: &Array2<f64>,
    groups: &[usize],
    config: &TrainConfig,
) -> Result<(GeneratorTerms, Gradients), MappingError> {
    let w = &config.weights;
    let mode = config.mode;
    let trace = nets.generator.forward_trace(x)?;
    let mapped = trace.output().clone();
    let mut d_out = Array2::<f64>::zeros(mapped.raw_dim());
    let mut terms = GeneratorTerms::default();
    let prot = scoped_rows(groups, Scope::Protected);

    if w.lambda_rec > 0.0 {
        let rows = scoped_rows(groups, mode.recons_scope());
        if !rows.is_empty() {
            let orig = x.select(Axis(0), &rows);
            let img = mapped.select(Axis(0), &rows);
            let lg = loss_recons(&orig, &img)?;
            terms.recons = lg.value;
            terms.total += w.lambda_rec * lg.value;
            add_rows(&mut d_out, &rows, &lg.grad, w.lambda_rec);
        }
    }

    if w.lambda_c > 0.0 && !prot.is_empty() {
        let m_prot = mapped.select(Axis(0), &prot);
        let ctrace = nets.classifier.forward_trace(&m_prot)?;
        let lg = loss_c(ctrace.output())?;
        terms.l_c = lg.value;
        terms.total -= w.lambda_c * lg.value;
        let bp = nets.classifier.backward(&ctrace, &lg.grad)?;
        add_rows(&mut d_out, &prot, &bp.input_grad, -w.lambda_c);
    }

    let need_gan = w.lambda_gan > 0.0 && !prot.is_empty();
    let need_s = w.lambda_d > 0.0;
    if need_gan || need_s {
        let d_in = discriminator_input(x, &mapped, groups, mode);
        let htrace = nets.disc_trunk.forward_trace(&d_in)?;
        let h = htrace.output();
        let mut dh = Array2::<f64>::zeros(h.raw_dim());
        if need_gan {
            let h_prot = h.select(Axis(0), &prot);
            let ctrace = nets.critic_head.forward_trace(&h_prot)?;
            let lg = loss_gan(ctrace.output())?;
            terms.l_gan = lg.value;
            terms.total += w.lambda_gan * lg.value;
            let bp = nets.critic_head.backward(&ctrace, &lg.grad)?;
            add_rows(&mut dh, &prot, &bp.input_grad, w.lambda_gan);
        }
        if need_s {
            let dtrace = nets.disc_head.forward_trace(h)?;
            let probs = dtrace.output();
            let sign = mode.protection_sign();
            let ls = loss_protection(probs, groups, config.protection_loss)?;
            terms.l_s = ls.value;
            let mut g = ls.grad;
            let mut prot_value = ls.value;
            if w.lambda_g_mi > 0.0 {
                let mi = mi_soft(probs, groups)?;
                terms.mi = mi.value;
                prot_value += w.lambda_g_mi * mi.value;
                g.scaled_add(w.lambda_g_mi, &mi.grad);
            }
            terms.total += sign * w.lambda_d * prot_value;
            g *= sign * w.lambda_d;
            let bp = nets.disc_head.backward(&dtrace, &g)?;
            dh += &bp.input_grad;
        }
        let bp = nets.disc_trunk.backward(&htrace, &dh)?;
        // Only rows that came out of the generator carry gradient back.
        for (r, &g) in groups.iter().enumerate() {
            if g != PRIVILEGED || mode.maps_privileged_for_d() {
                d_out.row_mut(r).scaled_add(1.0, &bp.input_grad.row(r));
            }
        }
    }

    let bp = nets.generator.backward(&trace, &d_out)?;
    Ok((terms, bp.grads))
}

/// Gradients of the discriminator/critic objective for the three
/// discriminator-side networks.
#[derive(Debug, Clone)]
pub struct DiscriminatorGrads {
    pub trunk: Gradients,
    pub head: Gradients,
    pub critic: Gradients,
}

/// `L_D - lambda_d_mi * MI - lambda_dstd_gan * L_Dstd` on the rows the
/// discriminator sees for this batch.
pub fn discriminator_objective(
    nets: &Networks,
    x: &Array2<f64>,
    groups: &[usize],
    config: &TrainConfig,
) -> Result<(DiscriminatorTerms, DiscriminatorGrads), MappingError> {
    let w = &config.weights;
    let mapped = nets.generator.forward(x)?;
    let d_in = discriminator_input(x, &mapped, groups, config.mode);
    let htrace = nets.disc_trunk.forward_trace(&d_in)?;
    let h = htrace.output();
    let mut terms = DiscriminatorTerms::default();

    let dtrace = nets.disc_head.forward_trace(h)?;
    let probs = dtrace.output();
    let ld = loss_discriminator(probs, groups, config.protection_loss)?;
    terms.l_d = ld.value;
    terms.total = ld.value;
    let mut g = ld.grad;
    if w.lambda_d_mi > 0.0 {
        let mi = mi_soft(probs, groups)?;
        terms.mi = mi.value;
        terms.total -= w.lambda_d_mi * mi.value;
        g.scaled_add(-w.lambda_d_mi, &mi.grad);
    }
    let head_bp = nets.disc_head.backward(&dtrace, &g)?;
    let mut dh = head_bp.input_grad;

    let has_both = groups.contains(&PRIVILEGED) && groups.iter().any(|&g| g != PRIVILEGED);
    let critic = if w.lambda_dstd_gan > 0.0 && has_both {
        let ctrace = nets.critic_head.forward_trace(h)?;
        let dist = critic_distance(ctrace.output(), groups)?;
        terms.l_dstd = dist.value;
        terms.total -= w.lambda_dstd_gan * dist.value;
        let bp = nets
            .critic_head
            .backward(&ctrace, &(dist.grad * -w.lambda_dstd_gan))?;
        dh += &bp.input_grad;
        bp.grads
    } else {
        Gradients::zeros_like(&nets.critic_head)
    };
    let trunk_bp = nets.disc_trunk.backward(&htrace, &dh)?;
    Ok((
        terms,
        DiscriminatorGrads {
            trunk: trunk_bp.grads,
            head: head_bp.grads,
            critic,
        },
    ))
}

/// Per-epoch means of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recons: f64,
    pub l_c: f64,
    pub l_gan: f64,
    pub l_s: f64,
    pub g_mi: f64,
    pub generator: f64,
    pub l_d: f64,
    pub d_mi: f64,
    pub l_dstd: f64,
    pub discriminator: f64,
}

/// Splits rows into batches that each follow the overall group proportions.
///
/// Every row appears in exactly one batch per call.
pub fn stratified_batches<R: Rng>(groups: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let n = groups.len();
    if n == 0 {
        return Vec::new();
    }
    let n_batches = n.div_ceil(batch_size.max(1));
    let k = groups.iter().copied().max().unwrap_or(0) + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (r, &g) in groups.iter().enumerate() {
        members[g].push(r);
    }
    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); n_batches];
    for rows in members.iter_mut() {
        rows.shuffle(rng);
        let len = rows.len();
        for (b, batch) in batches.iter_mut().enumerate() {
            let lo = b * len / n_batches;
            let hi = (b + 1) * len / n_batches;
            batch.extend_from_slice(&rows[lo..hi]);
        }
    }
    let mut order: Vec<usize> = (0..n_batches).collect();
    order.shuffle(rng);
    order.into_iter().map(|b| std::mem::take(&mut batches[b])).collect()
}

/// Pretrains the group classifier on original feature rows.
///
/// Minimises one minus the mean probability of the true group with Adam.
/// A stratified fifth of the rows is held out; training stops once the
/// held-out accuracy has not improved by at least 1e-4 for
/// `classifier_patience` epochs, keeping the best parameters seen.
pub fn pretrain_classifier(features: &EncodedMatrix, config: &TrainConfig) -> Result<DenseNet, MappingError> {
    let k = features.k;
    let present = {
        let mut seen = vec![false; k.max(1)];
        for &g in &features.groups {
            if g < seen.len() {
                seen[g] = true;
            }
        }
        seen.iter().filter(|&&s| s).count()
    };
    if k < 2 || present < 2 {
        return Err(MappingError::TooFewGroups(present));
    }
    let seed = crate::rng::derive_seed(config.seed, "classifier");
    let (train_rows, valid_rows) = match holdout_split(&features.groups, 0.2, seed) {
        Ok(split) => split,
        Err(_) => {
            let all: Vec<usize> = (0..features.nrows()).collect();
            (all.clone(), all)
        }
    };
    let train = features.select_rows(&train_rows);
    let valid = features.select_rows(&valid_rows);
    let mut net = classifier_net(
        features.ncols(),
        k,
        config.hidden_width,
        crate::rng::derive_seed(config.seed, "init/classifier"),
    )?;
    let mut opt = OptimizerState::adam(config.learning_rate, &net);
    let mut rng = crate::rng::stream(config.seed, "classifier/batching");
    let mut best = (accuracy(&net, &valid)?, net.clone());
    let mut stale = 0;
    for epoch in 0..config.classifier_epochs {
        for batch in stratified_batches(&train.groups, config.batch_size, &mut rng) {
            let xb = train.values.select(Axis(0), &batch);
            let gb: Vec<usize> = batch.iter().map(|&r| train.groups[r]).collect();
            let trace = net.forward_trace(&xb)?;
            let lg = loss_discriminator(trace.output(), &gb, ProtectionLoss::Acc)?;
            finite("classifier", lg.value, epoch)?;
            let bp = net.backward(&trace, &lg.grad)?;
            opt.step(&mut net, &bp.grads);
        }
        let acc = accuracy(&net, &valid)?;
        if acc >= best.0 + 1e-4 {
            best = (acc, net.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.classifier_patience {
                break;
            }
        }
    }
    Ok(best.1)
}

fn accuracy(net: &DenseNet, data: &EncodedMatrix) -> Result<f64, MappingError> {
    let probs = net.forward(&data.values)?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(&data.groups)
        .filter(|(row, &g)| crate::data::argmax(row.as_slice().expect("contiguous")) == g)
        .count();
    Ok(hits as f64 / data.nrows().max(1) as f64)
}

/// Trained networks, the encoder they depend on, and the loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingEnsemble {
    pub encoder: Encoder,
    pub config: TrainConfig,
    pub nets: Networks,
    pub history: Vec<EpochRecord>,
    pub fingerprint: String,
    pub group_labels: Vec<String>,
}

/// Trains a mapping on `dataset`, pretraining the classifier first.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<MappingEnsemble, MappingError> {
    let encoder = Encoder::fit(dataset);
    let encoded = encoder.encode(dataset)?;
    let features = encoded.select_columns(&encoder.feature_columns());
    train_features(dataset, encoder, &features, config)
}

fn train_features(
    dataset: &Dataset,
    encoder: Encoder,
    features: &EncodedMatrix,
    config: &TrainConfig,
) -> Result<MappingEnsemble, MappingError> {
    config.validate(dataset.k())?;
    let config = config.resolved();
    let k = dataset.k();
    let mut nets = Networks::init(features.ncols(), k, &config)?;
    if config.weights.lambda_c > 0.0 {
        nets.classifier = pretrain_classifier(features, &config)?;
    }
    let mut ensemble = MappingEnsemble {
        encoder,
        config: config.clone(),
        nets,
        history: Vec::with_capacity(config.epochs),
        fingerprint: dataset.fingerprint(),
        group_labels: dataset.group_labels().to_vec(),
    };

    let mut g_opt = OptimizerState::adam(config.learning_rate, &ensemble.nets.generator);
    let mut trunk_opt = OptimizerState::adam(config.critic_learning_rate, &ensemble.nets.disc_trunk);
    let mut head_opt = OptimizerState::adam(config.critic_learning_rate, &ensemble.nets.disc_head);
    let mut critic_opt =
        OptimizerState::adam(config.critic_learning_rate, &ensemble.nets.critic_head);
    let mut rng = crate::rng::stream(config.seed, "batching");

    for epoch in 0..config.epochs {
        let snapshot = ensemble.clone();
        let fail = |term: &str| MappingError::NonFiniteLoss {
            epoch,
            term: term.to_string(),
            last_good: Some(Box::new(snapshot.clone())),
        };
        let mut rec = EpochRecord {
            epoch,
            recons: 0.0,
            l_c: 0.0,
            l_gan: 0.0,
            l_s: 0.0,
            g_mi: 0.0,
            generator: 0.0,
            l_d: 0.0,
            d_mi: 0.0,
            l_dstd: 0.0,
            discriminator: 0.0,
        };
        let batches = stratified_batches(&features.groups, config.batch_size, &mut rng);
        let nb = batches.len() as f64;
        for batch in &batches {
            let xb = features.values.select(Axis(0), batch);
            let gb: Vec<usize> = batch.iter().map(|&r| features.groups[r]).collect();
            let nets = &mut ensemble.nets;
            let mut last_d = DiscriminatorTerms::default();
            for _ in 0..config.critic_steps {
                let (terms, grads) = discriminator_objective(nets, &xb, &gb, &config)?;
                if !terms.total.is_finite() {
                    return Err(fail("discriminator"));
                }
                trunk_opt.step(&mut nets.disc_trunk, &grads.trunk);
                head_opt.step(&mut nets.disc_head, &grads.head);
                critic_opt.step(&mut nets.critic_head, &grads.critic);
                nets.disc_trunk.clip_weights(config.clip_c);
                nets.critic_head.clip_weights(config.clip_c);
                last_d = terms;
            }
            let (terms, grads) = generator_objective(nets, &xb, &gb, &config)?;
            if !terms.total.is_finite() || !grads.is_finite() {
                return Err(fail("generator"));
            }
            g_opt.step(&mut nets.generator, &grads);
            rec.recons += terms.recons / nb;
            rec.l_c += terms.l_c / nb;
            rec.l_gan += terms.l_gan / nb;
            rec.l_s += terms.l_s / nb;
            rec.g_mi += terms.mi / nb;
            rec.generator += terms.total / nb;
            rec.l_d += last_d.l_d / nb;
            rec.d_mi += last_d.mi / nb;
            rec.l_dstd += last_d.l_dstd / nb;
            rec.discriminator += last_d.total / nb;
        }
        if !ensemble.nets.generator.params_finite() {
            return Err(fail("generator parameters"));
        }
        log::debug!(
            "epoch {epoch}: generator {:.5} discriminator {:.5}",
            rec.generator,
            rec.discriminator
        );
        ensemble.history.push(rec);
    }
    Ok(ensemble)
}

/// Checkpoint manifest stored next to the five network files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub version: u32,
    pub mode: Mode,
    pub weights: LossWeights,
    pub seed: u64,
    pub epoch: usize,
    pub fingerprint: String,
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub group_labels: Vec<String>,
    pub history: Vec<EpochRecord>,
}

const NET_FILES: [&str; 5] = ["generator", "classifier", "disc_trunk", "disc_head", "critic_head"];

impl MappingEnsemble {
    /// Encoded feature rows of `dataset` (decision column removed).
    pub fn features(&self, dataset: &Dataset) -> Result<EncodedMatrix, MappingError> {
        let encoded = self
            .encoder
            .encode(dataset)
            .map_err(|e| MappingError::EncoderMismatch(e.to_string()))?;
        Ok(encoded.select_columns(&self.encoder.feature_columns()))
    }

    /// Passes every row through the generator regardless of its group.
    pub fn transform_features(&self, features: &EncodedMatrix) -> Result<EncodedMatrix, MappingError> {
        if features.ncols() != self.nets.generator.input_width() {
            return Err(MappingError::EncoderMismatch(format!(
                "{} feature columns, generator expects {}",
                features.ncols(),
                self.nets.generator.input_width()
            )));
        }
        if features.nrows() == 0 {
            return Ok(features.clone());
        }
        Ok(EncodedMatrix::new(
            self.nets.generator.forward(&features.values)?,
            features.groups.clone(),
            features.k,
        ))
    }

    /// Maps and decodes a dataset. The decision column is carried over
    /// unchanged.
    pub fn transform(&self, dataset: &Dataset) -> Result<Dataset, MappingError> {
        let encoded = self
            .encoder
            .encode(dataset)
            .map_err(|e| MappingError::EncoderMismatch(e.to_string()))?;
        let cols = self.encoder.feature_columns();
        let mapped = self.transform_features(&encoded.select_columns(&cols))?;
        let mut out = encoded.clone();
        for (i, &c) in cols.iter().enumerate() {
            out.values.column_mut(c).assign(&mapped.values.column(i));
        }
        Ok(self.encoder.decode(&out)?)
    }

    pub fn manifest(&self) -> EnsembleManifest {
        EnsembleManifest {
            version: 1,
            mode: self.config.mode,
            weights: self.config.weights,
            seed: self.config.seed,
            epoch: self.history.len(),
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            group_labels: self.group_labels.clone(),
            history: self.history.clone(),
        }
    }

    /// Writes `manifest.json` and one checkpoint pair per network into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), MappingError> {
        std::fs::create_dir_all(dir)?;
        let nets = [
            &self.nets.generator,
            &self.nets.classifier,
            &self.nets.disc_trunk,
            &self.nets.disc_head,
            &self.nets.critic_head,
        ];
        for (name, net) in NET_FILES.iter().zip(nets) {
            net.save(&dir.join(name))?;
        }
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_vec_pretty(&self.manifest())?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, MappingError> {
        let manifest: EnsembleManifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let load = |name: &str| DenseNet::load(&dir.join(name));
        Ok(Self {
            encoder: manifest.encoder,
            config: manifest.config,
            nets: Networks {
                generator: load("generator")?,
                classifier: load("classifier")?,
                disc_trunk: load("disc_trunk")?,
                disc_head: load("disc_head")?,
                critic_head: load("critic_head")?,
            },
            history: manifest.history,
            fingerprint: manifest.fingerprint,
            group_labels: manifest.group_labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn recons_examples() {
        let x = array![[0.1, 0.2], [0.3, 0.4]];
        assert_eq!(loss_recons(&x, &x).unwrap().value, 0.0);
        let zeros = Array2::zeros((3, 2));
        let half = Array2::from_elem((3, 2), 0.5);
        assert!(close(loss_recons(&zeros, &half).unwrap().value, 0.5));
        let a = array![[0.0, 1.0], [0.5, 0.5], [0.2, 0.9]];
        let b = array![[0.1, 0.7], [0.5, 0.0], [1.0, 1.0]];
        let hand = (0.1 + 0.3 + 0.0 + 0.5 + 0.8 + 0.1) / 6.0;
        assert!(close(loss_recons(&a, &b).unwrap().value, hand));
    }

    #[test]
    fn classifier_term_examples() {
        assert!(close(loss_c(&array![[1.0, 0.0], [1.0, 0.0]]).unwrap().value, 1.0));
        assert!(close(loss_c(&Array2::from_elem((5, 4), 0.25)).unwrap().value, 0.25));
        assert!(close(loss_c(&array![[0.9, 0.1], [0.5, 0.5]]).unwrap().value, 0.7));
    }

    #[test]
    fn critic_terms() {
        let zeros = Array2::zeros((4, 1));
        assert_eq!(loss_gan(&zeros).unwrap().value, 0.0);
        assert_eq!(critic_distance(&zeros, &[0, 0, 1, 1]).unwrap().value, 0.0);
        let scores = array![[1.0], [1.0], [0.0], [0.0]];
        assert!(close(critic_distance(&scores, &[0, 0, 1, 1]).unwrap().value, 1.0));
        assert_eq!(loss_gan(&array![[0.0], [0.0]]).unwrap().value, 0.0);
    }

    #[test]
    fn discriminator_losses() {
        let perfect = array![[1.0, 0.0], [0.0, 1.0]];
        for kind in [ProtectionLoss::Acc, ProtectionLoss::Ber] {
            assert_eq!(loss_discriminator(&perfect, &[0, 1], kind).unwrap().value, 0.0);
            let uniform = Array2::from_elem((4, 2), 0.5);
            assert!(close(
                loss_discriminator(&uniform, &[0, 0, 1, 1], kind).unwrap().value,
                0.5
            ));
        }
        // Group 0 holds two rows with correct probabilities 0.25 and 0.75.
        let probs = array![[0.25, 0.75], [0.75, 0.25], [0.0, 1.0]];
        let v = loss_discriminator(&probs, &[0, 0, 1], ProtectionLoss::Ber).unwrap().value;
        assert!(close(v, 0.25));
    }

    #[test]
    fn protection_losses() {
        let uniform = Array2::from_elem((8, 4), 0.25);
        let groups = [0, 0, 1, 1, 2, 2, 3, 3];
        assert!(loss_protection(&uniform, &groups, ProtectionLoss::Ber).unwrap().value.abs() < 1e-12);
        let perfect = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(close(
            loss_protection(&perfect, &[0, 1], ProtectionLoss::Ber).unwrap().value,
            0.5
        ));
        // Everything predicted privileged: only privileged rows contribute.
        let all_priv = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let v = loss_protection(&all_priv, &[0, 0, 1, 1, 1], ProtectionLoss::Acc).unwrap().value;
        assert!(close(v, 0.4));
    }

    #[test]
    fn mi_soft_examples() {
        let same = array![[0.3, 0.7], [0.3, 0.7], [0.3, 0.7], [0.3, 0.7]];
        assert!(mi_soft(&same, &[0, 1, 0, 1]).unwrap().value.abs() < 1e-12);
        let perfect = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let ln2 = std::f64::consts::LN_2;
        assert!(close(mi_soft(&perfect, &[0, 0, 1, 1]).unwrap().value, ln2));
        assert!(close(mi_soft(&perfect, &[1, 1, 0, 0]).unwrap().value, ln2));
        assert!(matches!(
            mi_soft(&array![[0.5, 0.6]], &[0]),
            Err(MappingError::RowNotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn mode_conflicts_are_rejected() {
        let mut cfg = TrainConfig {
            mode: Mode::Wgan,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(2), Err(MappingError::ModeConflict { .. })));
        cfg.weights = LossWeights {
            lambda_rec: 0.0,
            lambda_c: 0.0,
            lambda_d: 0.0,
            ..LossWeights::default()
        };
        assert!(cfg.validate(2).is_ok());
        cfg.mode = Mode::Gansan;
        assert!(matches!(
            cfg.validate(2),
            Err(MappingError::ModeConflict { field: "lambda_gan", .. })
        ));
    }

    #[test]
    fn acc_on_two_groups_needs_mi() {
        let cfg = TrainConfig {
            protection_loss: ProtectionLoss::Acc,
            use_mi: false,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        let cfg = TrainConfig {
            use_mi: false,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(2).is_ok());
        assert!(cfg.validate(3).is_err());
        assert!(cfg.validate(1).is_err());
    }

    #[test]
    fn weight_aliases_deserialize() {
        let w: LossWeights =
            serde_json::from_str(r#"{"lambda_r": 2.0, "lambda_dstd": 3.0, "lambda_big_d": 4.0}"#)
                .unwrap();
        assert_eq!((w.lambda_rec, w.lambda_gan, w.lambda_d), (2.0, 3.0, 4.0));
    }

    #[test]
    fn batches_cover_rows_and_follow_proportions() {
        let groups: Vec<usize> = (0..100).map(|i| usize::from(i % 4 == 0)).collect();
        let mut rng = crate::rng::seeded(1);
        let batches = stratified_batches(&groups, 20, &mut rng);
        assert_eq!(batches.len(), 5);
        let mut seen = vec![0; 100];
        for b in &batches {
            assert_eq!(b.len(), 20);
            assert_eq!(b.iter().filter(|&&r| groups[r] == 1).count(), 5);
            for &r in b {
                seen[r] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn all_zero_weights_give_zero_generator_loss() {
        let cfg = TrainConfig {
            weights: LossWeights::zero(),
            ..TrainConfig::default()
        };
        let nets = Networks::init(3, 2, &cfg).unwrap();
        let x = array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]];
        let (terms, grads) = generator_objective(&nets, &x, &[0, 1, 1], &cfg).unwrap();
        assert_eq!(terms.total, 0.0);
        assert!(grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn identity_generator_transform_is_identity() {
        let ds = crate::data::generate_lipton(20, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut ens = train(&ds, &cfg).unwrap();
        let feats = ens.features(&ds).unwrap();
        ens.nets.generator = DenseNet::identity(feats.ncols());
        assert_eq!(ens.transform_features(&feats).unwrap(), feats);
        let empty = feats.select_rows(&[]);
        assert_eq!(ens.transform_features(&empty).unwrap().nrows(), 0);
    }
}
