use fairmap_core::data::{generate_lipton, Column};
use fairmap_core::mapping::{train, LossWeights, MappingError};
use fairmap_core::{Mode, TrainConfig};

fn quick(mode: Mode) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        classifier_epochs: 10,
        hidden_width: 16,
        mode,
        seed: 5,
        ..TrainConfig::default()
    }
    .resolved()
}

#[test]
fn training_is_deterministic() {
    let ds = generate_lipton(300, 2).unwrap();
    let a = train(&ds, &quick(Mode::Fairmapping)).unwrap();
    let b = train(&ds, &quick(Mode::Fairmapping)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 4);
    let c = train(&ds, &TrainConfig { seed: 6, ..quick(Mode::Fairmapping) }).unwrap();
    assert_ne!(a.nets.generator, c.nets.generator);
}

#[test]
fn critic_side_weights_stay_clipped() {
    let ds = generate_lipton(300, 2).unwrap();
    for mode in [Mode::Fairmapping, Mode::Wgan] {
        let cfg = quick(mode);
        let e = train(&ds, &cfg).unwrap();
        for net in [&e.nets.disc_trunk, &e.nets.critic_head] {
            let worst = net.params().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst <= cfg.clip_c, "{mode:?}: {worst}");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let ds = generate_lipton(200, 4).unwrap();
    let e = train(&ds, &quick(Mode::GansanOm)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    e.save(dir.path()).unwrap();
    let back = fairmap_core::MappingEnsemble::load(dir.path()).unwrap();
    assert_eq!(back, e);
    assert_eq!(back.manifest().mode, Mode::GansanOm);
    assert_eq!(back.transform(&ds).unwrap(), e.transform(&ds).unwrap());
}

#[test]
fn transform_keeps_decision_and_groups() {
    let ds = generate_lipton(200, 7).unwrap();
    let e = train(&ds, &quick(Mode::Fairmapping)).unwrap();
    let out = e.transform(&ds).unwrap();
    assert_eq!(out.len(), ds.len());
    assert_eq!(out.groups(), ds.groups());
    assert_eq!(
        out.columns()[ds.decision_index()],
        ds.columns()[ds.decision_index()]
    );
    for c in out.columns() {
        if let Column::Numeric(v) = c {
            assert!(v.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn mode_conflicts_fail_before_training() {
    let ds = generate_lipton(100, 1).unwrap();
    let cfg = TrainConfig {
        mode: Mode::Wgan,
        weights: LossWeights::default(),
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(
        train(&ds, &cfg),
        Err(MappingError::ModeConflict { field: "lambda_rec", .. })
    ));
}
