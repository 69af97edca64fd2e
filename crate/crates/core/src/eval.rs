//! Pareto fronts, trade-off selection, deployment scenarios, random-search
//! sweeps and cross-validation.
//!
//! Metrics travel as a name to value map. Names follow the report tables:
//! `BER_rc_prv`, `SAcc_og_prv`, `MI_rc_prv`, `Pc_prot`, `Fid_priv` and so on.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifiers::{ClassifierError, ClassifierKind, ExternalClassifier};
use crate::data::{holdout_split, split_kfold, DataError, Dataset, EncodedMatrix, Encoder};
use crate::mapping::{self, LossWeights, MappingEnsemble, MappingError, TrainConfig};
use crate::metrics::{
    self, fairness_gaps, FairnessGaps, MetricsError, RowScope, Variant,
};
use crate::sinkhorn::{sinkhorn_divergence, SinkhornConfig, SinkhornError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no points to evaluate")]
    EmptyFront,
    #[error("model {model_id} has no metric `{metric}`")]
    MissingMetric { model_id: usize, metric: String },
    #[error("model {model_id} has non-finite `{metric}` = {value}")]
    NonFiniteMetric {
        model_id: usize,
        metric: String,
        value: f64,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub mod names {
    pub const FID_PRIV: &str = "Fid_priv";
    pub const FID_PROT: &str = "Fid_prot";
    pub const FID_ALL: &str = "Fid_all";
    pub const BER_OG: &str = "BER_og_prv";
    pub const BER_RC: &str = "BER_rc_prv";
    pub const SACC_OG: &str = "SAcc_og_prv";
    pub const SACC_RC: &str = "SAcc_rc_prv";
    pub const MI_OG: &str = "MI_og_prv";
    pub const MI_RC: &str = "MI_rc_prv";
    pub const PC_PROT: &str = "Pc_prot";
    pub const PC_ALL: &str = "Pc_all";
    /// `R_prot` against `G(R_prot)`.
    pub const SK_PROT: &str = "Sk_prot_mapped";
    /// `G(R_priv)` against `G(R_prot)`.
    pub const SK_MAPPED: &str = "Sk_mapped_priv_prot";
    /// `R_priv` against `G(R_prot)`.
    pub const SK_TARGET: &str = "Sk_priv_mapped_prot";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Direction in which a metric improves.
pub fn metric_direction(metric: &str) -> Direction {
    if metric.starts_with("SAcc") || metric.starts_with("MI") || metric.starts_with("Sk_") {
        Direction::Minimize
    } else {
        Direction::Maximize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub weights: LossWeights,
    /// Short hash of the full training configuration.
    pub config_digest: String,
}

impl Hyperparameters {
    pub fn of(config: &TrainConfig) -> Self {
        let bytes = serde_json::to_vec(config).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        Self {
            weights: config.weights,
            config_digest: digest[..8].iter().map(|b| format!("{b:02x}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub model_id: usize,
    pub hyperparameters: Hyperparameters,
    pub metrics: BTreeMap<String, f64>,
}

impl ParetoPoint {
    pub fn metric(&self, name: &str) -> Result<f64, EvalError> {
        let value = *self.metrics.get(name).ok_or_else(|| EvalError::MissingMetric {
            model_id: self.model_id,
            metric: name.to_string(),
        })?;
        if !value.is_finite() {
            return Err(EvalError::NonFiniteMetric {
                model_id: self.model_id,
                metric: name.to_string(),
                value,
            });
        }
        Ok(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerspectiveName {
    Fairmapping,
    Wgan,
    Attgan,
    GansanDirm,
}

/// An objective set used to build a front.
///
/// `use_sacc` swaps the BER objective for minimizing SAcc of the same
/// variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perspective {
    pub name: PerspectiveName,
    #[serde(default)]
    pub use_sacc: bool,
}

impl Perspective {
    pub fn new(name: PerspectiveName) -> Self {
        Self {
            name,
            use_sacc: false,
        }
    }

    pub fn objectives(&self) -> Vec<(&'static str, Direction)> {
        let protection = if self.use_sacc {
            (names::SACC_RC, Direction::Minimize)
        } else {
            (names::BER_RC, Direction::Maximize)
        };
        match self.name {
            PerspectiveName::Fairmapping => vec![
                (names::FID_PRIV, Direction::Maximize),
                protection,
                (names::PC_PROT, Direction::Maximize),
            ],
            PerspectiveName::Wgan => vec![(names::PC_ALL, Direction::Maximize)],
            PerspectiveName::Attgan => vec![
                (names::FID_ALL, Direction::Maximize),
                (names::PC_ALL, Direction::Maximize),
            ],
            PerspectiveName::GansanDirm => vec![(names::FID_ALL, Direction::Maximize), protection],
        }
    }

    /// Objective values oriented so that larger is better.
    pub fn oriented(&self, point: &ParetoPoint) -> Result<Vec<f64>, EvalError> {
        self.objectives()
            .into_iter()
            .map(|(name, dir)| {
                let v = point.metric(name)?;
                Ok(match dir {
                    Direction::Maximize => v,
                    Direction::Minimize => -v,
                })
            })
            .collect()
    }
}

/// Weakly better everywhere and strictly better somewhere, larger is better.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y) && a.iter().zip(b).any(|(x, y)| x > y)
}

/// Indices of the non-dominated rows of `objectives` (larger is better), in
/// ascending order. Among equal vectors only the first index is kept.
pub fn front_indices(objectives: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..objectives.len()).collect();
    // A dominating vector is lexicographically larger, so it comes first.
    order.sort_by(|&i, &j| {
        objectives[j]
            .iter()
            .zip(&objectives[i])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        let v = &objectives[i];
        if front
            .iter()
            .any(|&f| objectives[f] == *v || dominates(&objectives[f], v))
        {
            continue;
        }
        front.push(i);
    }
    front.sort_unstable();
    front
}

/// Non-dominated subset of `points`, ordered by model id. Points with equal
/// objective vectors are kept once (lowest model id).
pub fn pareto_front(points: &[ParetoPoint], perspective: &Perspective) -> Result<Vec<ParetoPoint>, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyFront);
    }
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by_key(|p| p.model_id);
    let objectives = sorted
        .iter()
        .map(|p| perspective.oriented(p))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(front_indices(&objectives)
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect())
}

/// Re-scores every member of `front` with `evaluate` and filters the result
/// under `perspective`. New metrics overwrite old ones of the same name.
pub fn reevaluate_perspective<F>(front: &[ParetoPoint], perspective: &Perspective, evaluate: F) -> Result<Vec<ParetoPoint>, EvalError>
where
    F: Fn(&ParetoPoint) -> Result<BTreeMap<String, f64>, EvalError>,
{
    let rescored = front
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.metrics.extend(evaluate(p)?);
            Ok(q)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    pareto_front(&rescored, perspective)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl SelectionCoefficients {
    pub fn for_groups(k: usize) -> Self {
        Self {
            alpha: 1.0,
            beta: if k > 2 { 1.7 } else { 0.0 },
            gamma: 0.2,
            delta: 1.0,
        }
    }

    fn validate(&self) -> Result<(), EvalError> {
        if [self.alpha, self.beta, self.gamma, self.delta]
            .iter()
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return Err(EvalError::InvalidConfig(format!(
                "selection coefficients must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Weighted squared distance of a point to the ideal trade-off.
pub fn selection_score(point: &ParetoPoint, coeffs: &SelectionCoefficients, k: usize) -> Result<f64, EvalError> {
    let optimum = (k as f64 - 1.0) / k as f64;
    let ber = point.metric(names::BER_RC)?;
    let mi = point.metric(names::MI_RC)?;
    let pc = point.metric(names::PC_PROT)?;
    let fid = point.metric(names::FID_PRIV)?;
    Ok(coeffs.alpha * (ber - optimum).powi(2)
        + coeffs.beta * mi.powi(2)
        + coeffs.gamma * (pc - 1.0).powi(2)
        + coeffs.delta * (fid - 1.0).powi(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub point: ParetoPoint,
    pub score: f64,
}

/// The front member with the lowest score; ties go to higher `Fid_priv`,
/// then lower model id.
pub fn select_tradeoff(front: &[ParetoPoint], coeffs: &SelectionCoefficients, k: usize) -> Result<Selection, EvalError> {
    coeffs.validate()?;
    let mut best: Option<(f64, f64, &ParetoPoint)> = None;
    for p in front {
        let score = selection_score(p, coeffs, k)?;
        let fid = p.metric(names::FID_PRIV)?;
        let better = match best {
            None => true,
            Some((s, f, q)) => {
                score < s || (score == s && (fid > f || (fid == f && p.model_id < q.model_id)))
            }
        };
        if better {
            best = Some((score, fid, p));
        }
    }
    let (score, _, point) = best.ok_or(EvalError::EmptyFront)?;
    Ok(Selection {
        point: point.clone(),
        score,
    })
}

/// Anything that maps encoded feature rows.
pub trait FeatureTransform: Sync {
    fn map_features(&self, features: &EncodedMatrix) -> Result<EncodedMatrix, EvalError>;
}

impl FeatureTransform for MappingEnsemble {
    fn map_features(&self, features: &EncodedMatrix) -> Result<EncodedMatrix, EvalError> {
        Ok(self.transform_features(features)?)
    }
}

pub struct Identity;

impl FeatureTransform for Identity {
    fn map_features(&self, features: &EncodedMatrix) -> Result<EncodedMatrix, EvalError> {
        Ok(features.clone())
    }
}

/// Mapped rows, with the privileged rows restored for the og variant.
pub fn variant_matrix(original: &EncodedMatrix, mapped: &EncodedMatrix, variant: Variant) -> EncodedMatrix {
    match variant {
        Variant::RcPrv => mapped.clone(),
        Variant::OgPrv => mapped.with_rows_from(&original.values, &original.privileged_rows()),
    }
}

/// Encoded feature rows and decisions of a train/test pair.
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub train: EncodedMatrix,
    pub train_y: Vec<bool>,
    pub test: EncodedMatrix,
    pub test_y: Vec<bool>,
}

impl LabeledSplit {
    pub fn new(encoder: &Encoder, train: &Dataset, test: &Dataset) -> Result<Self, EvalError> {
        let cols = encoder.feature_columns();
        Ok(Self {
            train: encoder.encode(train)?.select_columns(&cols),
            train_y: train.decisions(),
            test: encoder.encode(test)?.select_columns(&cols),
            test_y: test.decisions(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Baseline,
    DataPublishing,
    FairClassification,
    LocalSanitization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Original,
    Transformed,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Baseline,
        Scenario::DataPublishing,
        Scenario::FairClassification,
        Scenario::LocalSanitization,
    ];

    /// Data the task classifier is trained on and tested on.
    pub fn composition(self) -> (Source, Source) {
        use Source::*;
        match self {
            Scenario::Baseline => (Original, Original),
            Scenario::DataPublishing => (Transformed, Transformed),
            Scenario::FairClassification => (Transformed, Original),
            Scenario::LocalSanitization => (Original, Transformed),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::DataPublishing => "data_publishing",
            Scenario::FairClassification => "fair_classification",
            Scenario::LocalSanitization => "local_sanitization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// How transformed data is assembled; irrelevant for the baseline.
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub spec: ScenarioSpec,
    pub classifier: ClassifierKind,
    pub accuracy: f64,
    pub group_accuracy: Vec<f64>,
    pub gaps: FairnessGaps,
}

/// Trains a task classifier on the scenario's training data and evaluates
/// it on its test data, always against the original decisions.
pub fn run_scenario(
    spec: ScenarioSpec,
    transform: &dyn FeatureTransform,
    split: &LabeledSplit,
    kind: ClassifierKind,
    seed: u64,
) -> Result<ScenarioResult, EvalError> {
    let pick = |source: Source, original: &EncodedMatrix| -> Result<EncodedMatrix, EvalError> {
        Ok(match source {
            Source::Original => original.clone(),
            Source::Transformed => {
                variant_matrix(original, &transform.map_features(original)?, spec.variant)
            }
        })
    };
    let (train_src, test_src) = spec.scenario.composition();
    let train = pick(train_src, &split.train)?;
    let test = pick(test_src, &split.test)?;
    let labels: Vec<usize> = split.train_y.iter().map(|&y| usize::from(y)).collect();
    let mut clf = ExternalClassifier::new(kind, crate::rng::derive_seed(seed, "task"));
    clf.fit(&train.values, &labels, 2)?;
    let pred: Vec<bool> = clf.predict(&test.values)?.into_iter().map(|p| p == 1).collect();
    let hits = pred.iter().zip(&split.test_y).filter(|(a, b)| a == b).count();
    let gaps = fairness_gaps(&split.test_y, &pred, &test.groups, test.k)?;
    Ok(ScenarioResult {
        spec,
        classifier: kind,
        accuracy: hits as f64 / pred.len() as f64,
        group_accuracy: gaps.groups.iter().map(|g| g.accuracy).collect(),
        gaps,
    })
}

/// The baseline once, then every other scenario under both variants, for
/// every classifier.
pub fn run_all_scenarios(
    transform: &dyn FeatureTransform,
    split: &LabeledSplit,
    kinds: &[ClassifierKind],
    seed: u64,
) -> Result<Vec<ScenarioResult>, EvalError> {
    let mut specs = vec![ScenarioSpec {
        scenario: Scenario::Baseline,
        variant: Variant::RcPrv,
    }];
    for scenario in &Scenario::ALL[1..] {
        for variant in [Variant::OgPrv, Variant::RcPrv] {
            specs.push(ScenarioSpec {
                scenario: *scenario,
                variant,
            });
        }
    }
    let jobs: Vec<(ScenarioSpec, ClassifierKind)> = specs
        .iter()
        .flat_map(|s| kinds.iter().map(move |k| (*s, *k)))
        .collect();
    jobs.par_iter()
        .map(|&(spec, kind)| run_scenario(spec, transform, split, kind, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub perspective: Perspective,
    /// Auditors of the protection and transformation metrics.
    pub classifiers: Vec<ClassifierKind>,
    /// Task classifiers for the scenarios.
    pub comparison_classifiers: Vec<ClassifierKind>,
    pub coefficients: Option<SelectionCoefficients>,
    pub epsilon: f64,
    pub sinkhorn: Option<SinkhornConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            perspective: Perspective::new(PerspectiveName::Fairmapping),
            classifiers: vec![ClassifierKind::Mlp, ClassifierKind::Dtree, ClassifierKind::Logistic],
            comparison_classifiers: vec![ClassifierKind::Gbc, ClassifierKind::SvmLinear],
            coefficients: None,
            epsilon: metrics::DEFAULT_EPSILON,
            sinkhorn: Some(SinkhornConfig::default()),
        }
    }
}

/// Every protection, transformation, fidelity and divergence metric of one
/// model on the test half of `split`.
pub fn evaluate_model(
    transform: &dyn FeatureTransform,
    split: &LabeledSplit,
    config: &EvalConfig,
    seed: u64,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let mapped_train = transform.map_features(&split.train)?;
    let mapped_test = transform.map_features(&split.test)?;
    let mut out = BTreeMap::new();
    for (variant, ber, sacc, mi) in [
        (Variant::OgPrv, names::BER_OG, names::SACC_OG, names::MI_OG),
        (Variant::RcPrv, names::BER_RC, names::SACC_RC, names::MI_RC),
    ] {
        let report = metrics::protection_report(
            &config.classifiers,
            &variant_matrix(&split.train, &mapped_train, variant),
            &variant_matrix(&split.test, &mapped_test, variant),
            variant,
            crate::rng::derive_seed(seed, "protection"),
        )?;
        out.insert(ber.to_string(), report.ber);
        out.insert(sacc.to_string(), report.sacc);
        out.insert(mi.to_string(), report.mi);
    }
    for (scope, name) in [(RowScope::Prot, names::PC_PROT), (RowScope::All, names::PC_ALL)] {
        let report = metrics::transformation_report(
            &config.classifiers,
            &split.train,
            &mapped_test,
            scope,
            crate::rng::derive_seed(seed, "transformation"),
        )?;
        out.insert(name.to_string(), report.pc);
    }
    for (scope, name) in [
        (RowScope::Priv, names::FID_PRIV),
        (RowScope::Prot, names::FID_PROT),
        (RowScope::All, names::FID_ALL),
    ] {
        out.insert(name.to_string(), metrics::fidelity(&split.test, &mapped_test, scope)?);
    }
    if let Some(sk) = &config.sinkhorn {
        let priv_rows = split.test.privileged_rows();
        let prot_rows = split.test.protected_rows();
        let orig_priv = split.test.select_rows(&priv_rows).values;
        let orig_prot = split.test.select_rows(&prot_rows).values;
        let g_priv = mapped_test.select_rows(&priv_rows).values;
        let g_prot = mapped_test.select_rows(&prot_rows).values;
        let pairs = [
            (names::SK_PROT, &orig_prot, &g_prot),
            (names::SK_MAPPED, &g_priv, &g_prot),
            (names::SK_TARGET, &orig_priv, &g_prot),
        ];
        let values = pairs
            .par_iter()
            .map(|(_, a, b)| sinkhorn_divergence(a.view(), b.view(), sk))
            .collect::<Result<Vec<_>, _>>()?;
        for ((name, _, _), r) in pairs.iter().zip(values) {
            out.insert(name.to_string(), r.value);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub budget: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Fraction of rows held out for evaluation.
    pub test_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budget: 100,
            lambda_min: 1e-2,
            lambda_max: 1e2,
            test_fraction: 1.0 / 3.0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.lambda_min > 0.0 && self.lambda_max >= self.lambda_min && self.lambda_max.is_finite()) {
            return Err(EvalError::InvalidConfig(format!(
                "lambda range [{}, {}] must be positive and ordered",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(EvalError::InvalidConfig(format!(
                "test fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum TrialOutcome {
    Completed { point: ParetoPoint },
    Failed { weights: LossWeights, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub outcome: TrialOutcome,
}

/// Training configuration of one trial: log-uniform weights for every
/// coefficient the mode leaves free.
pub fn trial_config(base: &TrainConfig, sweep: &SweepConfig, root_seed: u64, trial: usize) -> TrainConfig {
    let mut rng = crate::rng::stream(root_seed, &format!("sweep/weights/{trial}"));
    let (lo, hi) = (sweep.lambda_min.ln(), sweep.lambda_max.ln());
    let mut draw = || rng.random_range(lo..=hi).exp();
    let mut w = LossWeights::zero();
    w.lambda_rec = draw();
    w.lambda_c = draw();
    w.lambda_gan = draw();
    w.lambda_d = draw();
    w.lambda_d_mi = draw();
    w.lambda_g_mi = draw();
    w.lambda_dstd_gan = draw();
    let mut cfg = TrainConfig {
        weights: w,
        seed: crate::rng::derive_seed(root_seed, &format!("sweep/trial/{trial}")),
        ..base.clone()
    };
    cfg = cfg.resolved();
    cfg
}

/// Train/test partition shared by every trial of a sweep.
pub fn sweep_split(dataset: &Dataset, sweep: &SweepConfig, seed: u64) -> Result<(Dataset, Dataset), EvalError> {
    let (train, test) = holdout_split(
        dataset.groups(),
        sweep.test_fraction,
        crate::rng::derive_seed(seed, "sweep/split"),
    )?;
    Ok((dataset.select_rows(&train)?, dataset.select_rows(&test)?))
}

/// Trains and evaluates one configuration on a fixed split.
pub fn run_trial(
    model_id: usize,
    config: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    eval: &EvalConfig,
) -> Result<(MappingEnsemble, ParetoPoint), EvalError> {
    let ensemble = mapping::train(train, config)?;
    let split = LabeledSplit::new(&ensemble.encoder, train, test)?;
    let metrics = evaluate_model(&ensemble, &split, eval, crate::rng::derive_seed(config.seed, "eval"))?;
    let point = ParetoPoint {
        model_id,
        hyperparameters: Hyperparameters::of(config),
        metrics,
    };
    Ok((ensemble, point))
}

/// Runs every trial of `0..sweep.budget` not listed in `skip`, in parallel.
/// A failing trial is recorded rather than aborting the sweep. Records come
/// back ordered by trial index.
pub fn sweep(
    dataset: &Dataset,
    base: &TrainConfig,
    sweep: &SweepConfig,
    eval: &EvalConfig,
    seed: u64,
    skip: &BTreeSet<usize>,
) -> Result<Vec<TrialRecord>, EvalError> {
    sweep_with(dataset, base, sweep, eval, seed, skip, &|_| {})
}

/// [`sweep`] calling `on_record` as soon as each trial finishes.
pub fn sweep_with(
    dataset: &Dataset,
    base: &TrainConfig,
    sweep: &SweepConfig,
    eval: &EvalConfig,
    seed: u64,
    skip: &BTreeSet<usize>,
    on_record: &(dyn Fn(&TrialRecord) + Sync),
) -> Result<Vec<TrialRecord>, EvalError> {
    sweep.validate()?;
    base.validate(dataset.k()).or_else(|e| match e {
        // Trial weights are drawn afresh and resolved per mode.
        MappingError::ModeConflict { .. } => Ok(()),
        e => Err(e),
    })?;
    let (train, test) = sweep_split(dataset, sweep, seed)?;
    let todo: Vec<usize> = (0..sweep.budget).filter(|t| !skip.contains(t)).collect();
    let mut records: Vec<TrialRecord> = todo
        .par_iter()
        .map(|&trial| {
            let cfg = trial_config(base, sweep, seed, trial);
            let outcome = match run_trial(trial, &cfg, &train, &test, eval) {
                Ok((_, point)) => TrialOutcome::Completed { point },
                Err(e) => {
                    log::warn!("trial {trial} failed: {e}");
                    TrialOutcome::Failed {
                        weights: cfg.weights,
                        error: e.to_string(),
                    }
                }
            };
            let record = TrialRecord {
                trial,
                seed: cfg.seed,
                outcome,
            };
            on_record(&record);
            record
        })
        .collect();
    records.sort_by_key(|r| r.trial);
    Ok(records)
}

pub fn completed_points(records: &[TrialRecord]) -> Vec<ParetoPoint> {
    records
        .iter()
        .filter_map(|r| match &r.outcome {
            TrialOutcome::Completed { point } => Some(point.clone()),
            TrialOutcome::Failed { .. } => None,
        })
        .collect()
}

/// Rows of the cross-validation tables.
pub const CROSSVAL_METRICS: [&str; 8] = [
    names::BER_RC,
    names::BER_OG,
    names::SACC_RC,
    names::SACC_OG,
    names::MI_RC,
    names::MI_OG,
    names::PC_PROT,
    names::FID_PRIV,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalRow {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; zero with a single fold.
    pub std: f64,
    pub folds: Vec<f64>,
}

/// Mean and sample standard deviation of each metric over folds.
pub fn aggregate_folds(folds: &[BTreeMap<String, f64>], metrics: &[&str]) -> Result<Vec<CrossvalRow>, EvalError> {
    if folds.is_empty() {
        return Err(EvalError::EmptyFront);
    }
    metrics
        .iter()
        .map(|&m| {
            let values = folds
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    f.get(m).copied().ok_or_else(|| EvalError::MissingMetric {
                        model_id: i,
                        metric: m.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(CrossvalRow {
                metric: m.to_string(),
                mean,
                std,
                folds: values,
            })
        })
        .collect()
}

/// Retrains `config` on each training fold and evaluates on the held-out
/// fold.
pub fn crossval(
    dataset: &Dataset,
    config: &TrainConfig,
    eval: &EvalConfig,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<CrossvalRow>, EvalError> {
    let plan = split_kfold(dataset.groups(), n_folds, crate::rng::derive_seed(seed, "crossval"))?;
    let mut folds = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let train = dataset.select_rows(&plan.train_rows(fold))?;
        let test = dataset.select_rows(&plan.test_rows(fold))?;
        let cfg = TrainConfig {
            seed: crate::rng::derive_seed(config.seed, &format!("fold/{fold}")),
            ..config.clone()
        };
        let (_, point) = run_trial(fold, &cfg, &train, &test, eval)?;
        folds.push(point.metrics);
    }
    aggregate_folds(&folds, &CROSSVAL_METRICS)
}

const WEIGHT_COLUMNS: [&str; 7] = [
    "lambda_rec",
    "lambda_c",
    "lambda_gan",
    "lambda_d",
    "lambda_d_mi",
    "lambda_g_mi",
    "lambda_dstd_gan",
];

fn weight_values(w: &LossWeights) -> [f64; 7] {
    [
        w.lambda_rec,
        w.lambda_c,
        w.lambda_gan,
        w.lambda_d,
        w.lambda_d_mi,
        w.lambda_g_mi,
        w.lambda_dstd_gan,
    ]
}

/// One row per point: id, digest, the seven weights, then every metric in
/// name order. Metrics a point lacks are left empty.
pub fn write_pareto_csv<W: Write>(writer: W, points: &[ParetoPoint]) -> Result<(), EvalError> {
    let metric_names: BTreeSet<&str> = points
        .iter()
        .flat_map(|p| p.metrics.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["model_id", "config_digest"];
    header.extend(WEIGHT_COLUMNS);
    header.extend(metric_names.iter().copied());
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![p.model_id.to_string(), p.hyperparameters.config_digest.clone()];
        row.extend(weight_values(&p.hyperparameters.weights).iter().map(|v| v.to_string()));
        row.extend(
            metric_names
                .iter()
                .map(|m| p.metrics.get(*m).map_or(String::new(), |v| v.to_string())),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pareto_csv<R: Read>(reader: R) -> Result<Vec<ParetoPoint>, EvalError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EvalError::InvalidConfig(format!("Pareto CSV lacks column `{name}`")))
    };
    let id_col = col("model_id")?;
    let digest_col = col("config_digest")?;
    let weight_cols = WEIGHT_COLUMNS.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;
    let parse = |s: &str, what: &str| -> Result<f64, EvalError> {
        s.parse()
            .map_err(|_| EvalError::InvalidConfig(format!("cannot parse `{s}` in column `{what}`")))
    };
    let mut points = Vec::new();
    for record in r.records() {
        let record = record?;
        let model_id = record[id_col]
            .parse()
            .map_err(|_| EvalError::InvalidConfig(format!("bad model_id `{}`", &record[id_col])))?;
        let wv = weight_cols
            .iter()
            .zip(WEIGHT_COLUMNS)
            .map(|(&c, name)| parse(&record[c], name))
            .collect::<Result<Vec<_>, _>>()?;
        let weights = LossWeights {
            lambda_rec: wv[0],
            lambda_c: wv[1],
            lambda_gan: wv[2],
            lambda_d: wv[3],
            lambda_d_mi: wv[4],
            lambda_g_mi: wv[5],
            lambda_dstd_gan: wv[6],
        };
        let mut metrics = BTreeMap::new();
        for (i, name) in header.iter().enumerate() {
            if i == id_col || i == digest_col || weight_cols.contains(&i) || record[i].is_empty() {
                continue;
            }
            metrics.insert(name.to_string(), parse(&record[i], name)?);
        }
        points.push(ParetoPoint {
            model_id,
            hyperparameters: Hyperparameters {
                weights,
                config_digest: record[digest_col].to_string(),
            },
            metrics,
        });
    }
    Ok(points)
}

/// Scenario, variant, classifier, accuracies and gaps; one column per group
/// accuracy.
pub fn write_scenario_csv<W: Write>(writer: W, results: &[ScenarioResult]) -> Result<(), EvalError> {
    let k = results.iter().map(|r| r.group_accuracy.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["scenario", "variant", "classifier", "accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|g| format!("accuracy_group_{g}")));
    header.extend(["demo_parity", "tp_gap", "fp_gap", "within_epsilon"].map(String::from));
    w.write_record(&header)?;
    for r in results {
        let variant = if r.spec.scenario == Scenario::Baseline {
            "none"
        } else {
            r.spec.variant.name()
        };
        let mut row = vec![
            r.spec.scenario.name().to_string(),
            variant.to_string(),
            r.classifier.name().to_string(),
            r.accuracy.to_string(),
        ];
        row.extend((0..k).map(|g| r.group_accuracy.get(g).map_or(String::new(), |a| a.to_string())));
        row.extend([
            r.gaps.demo_parity.to_string(),
            r.gaps.tp_gap.to_string(),
            r.gaps.fp_gap.to_string(),
            r.gaps.within_epsilon().to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_crossval_csv<W: Write>(writer: W, rows: &[CrossvalRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "mean", "std"])?;
    for r in rows {
        w.write_record([r.metric.clone(), r.mean.to_string(), r.std.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
