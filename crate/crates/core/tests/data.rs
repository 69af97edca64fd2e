use fairmap_core::data::{generate_lipton, split_kfold};

#[test]
fn lipton_statistics_hold_for_every_seed() {
    for seed in 0..10 {
        let ds = generate_lipton(2000, seed).unwrap();
        let g = ds.groups();
        let y = ds.decisions();
        let n = ds.len() as f64;
        let priv_share = g.iter().filter(|&&s| s == 0).count() as f64 / n;
        let rate = |group: usize| {
            let rows: Vec<usize> = (0..ds.len()).filter(|&r| g[r] == group).collect();
            rows.iter().filter(|&&r| y[r]).count() as f64 / rows.len() as f64
        };
        let overall = y.iter().filter(|&&v| v).count() as f64 / n;
        assert!((priv_share - 0.5).abs() <= 0.02, "seed {seed}: {priv_share}");
        assert!((overall - 0.3425).abs() <= 0.02, "seed {seed}: {overall}");
        assert!((rate(0) - 0.27).abs() <= 0.02, "seed {seed}: {}", rate(0));
        assert!((rate(1) - 0.415).abs() <= 0.02, "seed {seed}: {}", rate(1));
    }
}

#[test]
fn lipton_three_folds() {
    let ds = generate_lipton(2000, 1).unwrap();
    let plan = split_kfold(ds.groups(), 3, 7).unwrap();
    let mut sizes = plan.fold_sizes();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![666, 667, 667]);
    for f in 0..3 {
        let rows = plan.test_rows(f);
        let share = rows.iter().filter(|&&r| ds.groups()[r] == 0).count() as f64 / rows.len() as f64;
        assert!((share - 0.5).abs() <= 0.02);
    }
}
