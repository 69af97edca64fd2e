use std::collections::BTreeMap;

use fairmap_core::baselines::{apply_dirm, fit_dirm};
use fairmap_core::data::{split_kfold, AttributeSpec, Column, Dataset, EncodedMatrix, Encoder, Role};
use fairmap_core::eval::{
    aggregate_folds, dominates, front_indices, pareto_front, select_tradeoff, Hyperparameters,
    ParetoPoint, Perspective, PerspectiveName, SelectionCoefficients,
};
use fairmap_core::mapping::{loss_protection, mi_soft, ProtectionLoss};
use fairmap_core::metrics::{ber_hard, diversity, fidelity, mi_discrete, sacc, RowScope};
use fairmap_core::nn::{Activation, DenseNet};
use fairmap_core::sinkhorn::{sinkhorn_divergence, SinkhornConfig};
use fairmap_core::TrainConfig;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(0.0..1.0f64, n * cols)
            .prop_map(move |v| Array2::from_shape_vec((n, cols), v).unwrap())
    })
}

/// Row-stochastic matrix with `k` columns.
fn probs(n: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.01..1.0f64, n * k).prop_map(move |v| {
        let mut m = Array2::from_shape_vec((n, k), v).unwrap();
        for mut row in m.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        m
    })
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (4usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-1e3..1e3f64, n),
            prop::collection::vec(0usize..3, n),
            prop::collection::vec(0usize..2, n),
        )
            .prop_map(move |(x, c, y)| {
                let schema = vec![
                    AttributeSpec::numeric("x"),
                    AttributeSpec::categorical("c", &["a", "b", "c"]),
                    AttributeSpec::categorical("s", &["p", "q"]).with_role(Role::Sensitive),
                    AttributeSpec::categorical("y", &["0", "1"]).with_role(Role::Decision),
                ];
                let s: Vec<usize> = (0..n).map(|i| i % 2).collect();
                Dataset::new(
                    schema,
                    vec![
                        Column::Numeric(x),
                        Column::Categorical(c),
                        Column::Categorical(s),
                        Column::Categorical(y),
                    ],
                )
                .unwrap()
            })
    })
}

fn point(id: usize, m: &[(&str, f64)]) -> ParetoPoint {
    ParetoPoint {
        model_id: id,
        hyperparameters: Hyperparameters::of(&TrainConfig::default()),
        metrics: m.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_inverts_encode(ds in dataset_strategy()) {
        let enc = Encoder::fit(&ds);
        let back = enc.decode(&enc.encode(&ds).unwrap()).unwrap();
        for (a, b) in ds.columns().iter().zip(back.columns()) {
            match (a, b) {
                (Column::Numeric(a), Column::Numeric(b)) => {
                    for (x, y) in a.iter().zip(b) {
                        prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
                    }
                }
                (Column::Categorical(a), Column::Categorical(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false, "column kind changed"),
            }
        }
    }

    #[test]
    fn folds_partition_rows(n in 12usize..80, folds in 2usize..5, seed in any::<u64>()) {
        let groups: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let plan = split_kfold(&groups, folds, seed).unwrap();
        let mut seen = vec![0usize; n];
        for f in 0..folds {
            for r in plan.test_rows(f) {
                seen[r] += 1;
            }
            let mut both: Vec<usize> = plan.test_rows(f);
            both.extend(plan.train_rows(f));
            both.sort_unstable();
            prop_assert_eq!(both, (0..n).collect::<Vec<_>>());
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn forward_is_deterministic_and_clipping_bounds(x in matrix(1..10, 3), seed in any::<u64>(), c in 0.001..1.0f64) {
        let mut net = DenseNet::new(&[3, 5, 2], &[Activation::Relu, Activation::Softmax], seed).unwrap();
        prop_assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        net.clip_weights(c);
        prop_assert!(net.params().iter().all(|v| v.abs() <= c));
    }

    #[test]
    fn ber_protection_term_matches_group_means(p in probs(12, 3)) {
        let groups: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let v = loss_protection(&p, &groups, ProtectionLoss::Ber).unwrap().value;
        let means: Vec<f64> = (0..3)
            .map(|g| (0..12).filter(|r| r % 3 == g).map(|r| p[[r, g]]).sum::<f64>() / 4.0)
            .collect();
        let want = -1.0 / 3.0 + means.iter().sum::<f64>() / 3.0;
        prop_assert!((v - want).abs() < 1e-12);
        prop_assert!(v >= -1.0 / 3.0 - 1e-12);
    }

    #[test]
    fn mi_soft_ignores_column_order(p in probs(10, 3), perm in Just([2usize, 0, 1])) {
        let groups: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let mut q = p.clone();
        for (j, &src) in perm.iter().enumerate() {
            q.column_mut(j).assign(&p.column(src));
        }
        let a = mi_soft(&p, &groups).unwrap().value;
        let b = mi_soft(&q, &groups).unwrap().value;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dirm_preserves_order_and_interpolates(
        vals in prop::collection::vec(0.0..100.0f64, 20),
        l1 in 0.0..1.0f64,
        l2 in 0.0..1.0f64,
    ) {
        let n = vals.len();
        let schema = vec![
            AttributeSpec::numeric("x"),
            AttributeSpec::categorical("s", &["a", "b"]).with_role(Role::Sensitive),
            AttributeSpec::categorical("y", &["0", "1"]).with_role(Role::Decision),
        ];
        let ds = Dataset::new(schema, vec![
            Column::Numeric(vals.clone()),
            Column::Categorical((0..n).map(|i| i % 2).collect()),
            Column::Categorical((0..n).map(|i| (i / 2) % 2).collect()),
        ]).unwrap();
        let repaired = |l: f64| -> Vec<f64> {
            let out = apply_dirm(&fit_dirm(&ds, l).unwrap(), &ds, false).unwrap();
            let Some((_, Column::Numeric(v))) = out.column("x") else { unreachable!() };
            v.clone()
        };
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (a, b, full) = (repaired(lo), repaired(hi), repaired(1.0));
        for i in 0..n {
            for j in 0..n {
                if i % 2 == j % 2 && vals[i] < vals[j] {
                    prop_assert!(a[i] <= a[j] + 1e-9);
                    prop_assert!(full[i] <= full[j] + 1e-9);
                }
            }
            // Linear in the level for a fixed rank, so monotone in it.
            let want = (1.0 - lo) * vals[i] + lo * full[i];
            prop_assert!((a[i] - want).abs() < 1e-6);
            let dir = full[i] - vals[i];
            prop_assert!((b[i] - a[i]) * dir >= -1e-9);
        }
    }

    #[test]
    fn balanced_ber_is_one_minus_sacc(preds in prop::collection::vec(0usize..2, 20)) {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let b = ber_hard(&preds, &labels, 2).unwrap();
        prop_assert!((b - (1.0 - sacc(&preds, &labels))).abs() < 1e-12);
    }

    #[test]
    fn mi_discrete_relabel_invariant(
        preds in prop::collection::vec(0usize..3, 30),
        labels in prop::collection::vec(0usize..3, 30),
    ) {
        let relabeled: Vec<usize> = preds.iter().map(|&p| [2, 0, 1][p]).collect();
        let a = mi_discrete(&preds, &labels);
        prop_assert!((a - mi_discrete(&relabeled, &labels)).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn fidelity_symmetric_and_one_on_equal(a in matrix(4..12, 3), b_seed in matrix(12..13, 3)) {
        let n = a.nrows();
        let b = b_seed.slice(ndarray::s![..n, ..]).to_owned();
        let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let ea = EncodedMatrix::new(a.clone(), groups.clone(), 2);
        let eb = EncodedMatrix::new(b.clone(), groups, 2);
        prop_assert_eq!(fidelity(&ea, &ea, RowScope::All).unwrap(), 1.0);
        let ab = fidelity(&ea, &eb, RowScope::All).unwrap();
        prop_assert!((ab - fidelity(&eb, &ea, RowScope::All).unwrap()).abs() < 1e-15);
        if a != b {
            prop_assert!(ab < 1.0);
        }
    }

    #[test]
    fn diversity_bounded_and_translation_invariant(x in matrix(2..15, 3), t in -5.0..5.0f64) {
        let d = diversity(&x);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        let shifted = &x + t;
        prop_assert!((diversity(&shifted) - d).abs() < 1e-9);
    }

    #[test]
    fn pareto_front_is_exactly_the_non_dominated_set(
        pts in prop::collection::vec(prop::collection::vec(0u8..6, 3), 1..60),
    ) {
        let v: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|&x| f64::from(x)).collect()).collect();
        let front = front_indices(&v);
        for &i in &front {
            for &j in &front {
                prop_assert!(!dominates(&v[i], &v[j]));
            }
        }
        for i in 0..v.len() {
            let dominated = v.iter().any(|w| dominates(w, &v[i]));
            let dup_earlier = (0..i).any(|j| v[j] == v[i]);
            prop_assert_eq!(front.contains(&i), !dominated && !dup_earlier);
        }
    }

    #[test]
    fn selection_ignores_front_order(
        raw in prop::collection::vec((0.0..0.5f64, 0.0..0.1f64, 0.5..1.0f64, 0.9..1.0f64), 1..12),
        rot in 0usize..12,
    ) {
        let pts: Vec<ParetoPoint> = raw
            .iter()
            .enumerate()
            .map(|(i, &(b, m, p, f))| point(i, &[("BER_rc_prv", b), ("MI_rc_prv", m), ("Pc_prot", p), ("Fid_priv", f)]))
            .collect();
        let coeffs = SelectionCoefficients::for_groups(2);
        let a = select_tradeoff(&pts, &coeffs, 2).unwrap();
        let mut shuffled = pts.clone();
        shuffled.rotate_left(rot % pts.len());
        shuffled.reverse();
        let b = select_tradeoff(&shuffled, &coeffs, 2).unwrap();
        prop_assert_eq!(a.point.model_id, b.point.model_id);
        // The front keeps the same order-independent answer too.
        let front = pareto_front(&pts, &Perspective::new(PerspectiveName::Fairmapping)).unwrap();
        let ids: Vec<usize> = front.iter().map(|p| p.model_id).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        prop_assert_eq!(ids, sorted);
    }

    #[test]
    fn crossval_means_within_fold_range(vals in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 2), 2..6)) {
        let folds: Vec<BTreeMap<String, f64>> = vals
            .iter()
            .map(|v| [("a".to_string(), v[0]), ("b".to_string(), v[1])].into_iter().collect())
            .collect();
        let rows = aggregate_folds(&folds, &["a", "b"]).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let col: Vec<f64> = vals.iter().map(|v| v[i]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.mean >= lo - 1e-12 && r.mean <= hi + 1e-12);
            prop_assert!(r.std >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sinkhorn_symmetric_nonnegative_zero_on_self(a in matrix(2..8, 2), b in matrix(2..8, 2)) {
        let cfg = SinkhornConfig::default();
        let saa = sinkhorn_divergence(a.view(), a.view(), &cfg).unwrap().value;
        prop_assert!(saa.abs() <= 1e-9);
        let ab = sinkhorn_divergence(a.view(), b.view(), &cfg).unwrap().value;
        let ba = sinkhorn_divergence(b.view(), a.view(), &cfg).unwrap().value;
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!(ab >= -1e-7);
    }
}
