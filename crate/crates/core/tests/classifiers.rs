use fairmap_core::classifiers::{ClassifierKind, ExternalClassifier};
use fairmap_core::data::argmax;
use fairmap_core::rng::seeded;
use ndarray::Array2;
use rand::Rng;

/// Gaussian-ish blobs around well separated centers, one per class.
fn blobs(n_per: usize, k: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = seeded(seed);
    let mut x = Array2::zeros((n_per * k, 2));
    let mut y = Vec::with_capacity(n_per * k);
    for c in 0..k {
        let angle = c as f64 / k as f64 * std::f64::consts::TAU;
        let (cx, cy) = (0.5 + 0.35 * angle.cos(), 0.5 + 0.35 * angle.sin());
        for i in 0..n_per {
            let r = c * n_per + i;
            x[[r, 0]] = cx + 0.05 * (rng.random::<f64>() - 0.5);
            x[[r, 1]] = cy + 0.05 * (rng.random::<f64>() - 0.5);
            y.push(c);
        }
    }
    (x, y)
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

#[test]
fn every_kind_separates_blobs() {
    for k in [2, 3] {
        let (x, y) = blobs(60, k, 3 + k as u64);
        for kind in ClassifierKind::ALL {
            let mut clf = ExternalClassifier::new(kind, 1);
            clf.fit(&x, &y, k).unwrap();
            let acc = accuracy(&clf.predict(&x).unwrap(), &y);
            assert!(acc >= 0.99, "{kind} k={k}: accuracy {acc}");
        }
    }
}

#[test]
fn predict_is_argmax_of_proba_and_rows_sum_to_one() {
    let (x, y) = blobs(40, 3, 9);
    let mut rng = seeded(10);
    let probe = Array2::from_shape_fn((50, 2), |_| rng.random::<f64>());
    for kind in ClassifierKind::ALL {
        let mut clf = ExternalClassifier::new(kind, 2);
        clf.fit(&x, &y, 3).unwrap();
        let p = clf.predict_proba(&probe).unwrap();
        let pred = clf.predict(&probe).unwrap();
        for (r, row) in p.rows().into_iter().enumerate() {
            assert!((row.sum() - 1.0).abs() < 1e-9, "{kind}: row {r} sums to {}", row.sum());
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(pred[r], argmax(&row.to_vec()), "{kind} row {r}");
        }
    }
}

#[test]
fn gbc_training_loss_never_increases() {
    let mut rng = seeded(77);
    let x = Array2::from_shape_fn((200, 3), |_| rng.random::<f64>());
    let y: Vec<usize> = x
        .rows()
        .into_iter()
        .map(|r| usize::from(r[0] + 0.3 * r[1] > 0.6 + 0.1 * (r[2] - 0.5)))
        .collect();
    let mut clf = ExternalClassifier::new(ClassifierKind::Gbc, 0);
    clf.fit(&x, &y, 2).unwrap();
    let staged = clf.staged_log_loss(&x, &y).unwrap();
    assert!(staged.len() > 2);
    for w in staged.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "loss went up: {w:?}");
    }
    assert!(staged.last().unwrap() < &staged[0]);
}

#[test]
fn same_seed_same_model() {
    let (x, y) = blobs(30, 2, 4);
    for kind in ClassifierKind::ALL {
        let mut a = ExternalClassifier::new(kind, 42);
        let mut b = ExternalClassifier::new(kind, 42);
        a.fit(&x, &y, 2).unwrap();
        b.fit(&x, &y, 2).unwrap();
        assert_eq!(a, b, "{kind}");
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = blobs(30, 3, 5);
    for kind in ClassifierKind::ALL {
        let mut clf = ExternalClassifier::new(kind, 8);
        clf.fit(&x, &y, 3).unwrap();
        let stem = dir.path().join(kind.name());
        clf.save(&stem).unwrap();
        let back = ExternalClassifier::load(&stem).unwrap();
        assert_eq!(back.kind, kind);
        assert_eq!(back.n_classes(), 3);
        assert_eq!(
            back.predict_proba(&x).unwrap(),
            clf.predict_proba(&x).unwrap(),
            "{kind}"
        );
    }
}
