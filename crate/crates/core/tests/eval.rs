use std::collections::BTreeSet;

use fairmap_core::classifiers::ClassifierKind;
use fairmap_core::data::{generate_lipton, Encoder};
use fairmap_core::eval::{
    completed_points, crossval, evaluate_model, run_all_scenarios, sweep, sweep_split,
    EvalConfig, Identity, LabeledSplit, Scenario, SweepConfig, TrialOutcome, CROSSVAL_METRICS,
};
use fairmap_core::TrainConfig;

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        classifier_epochs: 5,
        hidden_width: 8,
        ..TrainConfig::default()
    }
}

fn quick_eval() -> EvalConfig {
    EvalConfig {
        classifiers: vec![ClassifierKind::Logistic],
        comparison_classifiers: vec![ClassifierKind::Logistic],
        sinkhorn: None,
        ..EvalConfig::default()
    }
}

#[test]
fn identity_scenarios_match_the_baseline() {
    let ds = generate_lipton(300, 1).unwrap();
    let (train, test) = sweep_split(&ds, &SweepConfig::default(), 3).unwrap();
    let enc = Encoder::fit(&train);
    let split = LabeledSplit::new(&enc, &train, &test).unwrap();
    let kinds = [ClassifierKind::Logistic, ClassifierKind::Dtree];
    let results = run_all_scenarios(&Identity, &split, &kinds, 9).unwrap();
    assert_eq!(results.len(), 7 * kinds.len());
    let seen: BTreeSet<&str> = results.iter().map(|r| r.spec.scenario.name()).collect();
    assert_eq!(seen.len(), Scenario::ALL.len());
    for r in &results {
        let base = results
            .iter()
            .find(|b| b.spec.scenario == Scenario::Baseline && b.classifier == r.classifier)
            .unwrap();
        assert_eq!(r.accuracy, base.accuracy, "{:?}", r.spec);
        assert_eq!(r.gaps, base.gaps, "{:?}", r.spec);
    }
}

#[test]
fn identity_has_perfect_fidelity_and_baseline_protection() {
    let ds = generate_lipton(300, 2).unwrap();
    let (train, test) = sweep_split(&ds, &SweepConfig::default(), 3).unwrap();
    let enc = Encoder::fit(&train);
    let split = LabeledSplit::new(&enc, &train, &test).unwrap();
    let m = evaluate_model(&Identity, &split, &quick_eval(), 1).unwrap();
    assert_eq!(m["Fid_priv"], 1.0);
    assert_eq!(m["Fid_all"], 1.0);
    assert_eq!(m["BER_og_prv"], m["BER_rc_prv"]);
    // Hair length alone separates the groups well.
    assert!(m["BER_rc_prv"] < 0.3, "{m:?}");
    assert!(m["Pc_prot"] < 0.3, "{m:?}");
}

#[test]
fn sweep_is_reproducible_and_skips_done_trials() {
    let ds = generate_lipton(200, 3).unwrap();
    let s = SweepConfig { budget: 3, ..SweepConfig::default() };
    let a = sweep(&ds, &quick_train(), &s, &quick_eval(), 4, &BTreeSet::new()).unwrap();
    let b = sweep(&ds, &quick_train(), &s, &quick_eval(), 4, &BTreeSet::new()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert_eq!(completed_points(&a).len(), 3);
    let rest = sweep(&ds, &quick_train(), &s, &quick_eval(), 4, &[0, 2].into_iter().collect()).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0], a[1]);
    for r in &a {
        assert!(matches!(r.outcome, TrialOutcome::Completed { .. }));
    }
}

#[test]
fn crossval_reports_every_metric() {
    let ds = generate_lipton(240, 5).unwrap();
    let rows = crossval(&ds, &quick_train(), &quick_eval(), 3, 2).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(names, CROSSVAL_METRICS.to_vec());
    for r in &rows {
        assert_eq!(r.folds.len(), 3);
        let lo = r.folds.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.folds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(r.mean >= lo && r.mean <= hi, "{r:?}");
    }
}
