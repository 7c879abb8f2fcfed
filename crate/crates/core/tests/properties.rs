mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hctn::anomaly::{fit_score, remove_outliers, ForestConfig};
use hctn::data::{make_split, Dims, QoSRecord, SparseQoSTensor, SplitSpec};
use hctn::eval::{confidence_interval, metrics_from_residuals};
use hctn::gmm::{gdi_from_slice, label_step, local_stats};
use hctn::gpam::{masked_nmf, NmfConfig};
use hctn::hypergraph::build_snapshot;
use hctn::model::cauchy_loss;

fn cells(n: usize, m: usize, density: f64, seed: u64) -> Vec<(usize, usize, f64)> {
    common::random_cells(n, m, density, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_never_below_mae(res in prop::collection::vec(-50.0f64..50.0, 1..200)) {
        let m = metrics_from_residuals(&res).unwrap();
        prop_assert!(m.rmse >= m.mae);
        prop_assert!(m.mae >= 0.0);
        prop_assert_eq!(m.count, res.len());
    }

    #[test]
    fn interval_widens_with_level(runs in prop::collection::vec(0.0f64..5.0, 2..40)) {
        let widths: Vec<f64> = [0.90, 0.95, 0.99]
            .iter()
            .map(|&l| {
                let (lo, hi) = confidence_interval(&runs, l).unwrap();
                hi - lo
            })
            .collect();
        prop_assert!(widths[0] <= widths[1] && widths[1] <= widths[2]);
    }

    #[test]
    fn cauchy_is_nonnegative_even_and_monotone(r in -100.0f64..100.0, gamma in 0.05f64..10.0) {
        let a = cauchy_loss(&[r], gamma).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, cauchy_loss(&[-r], gamma).unwrap());
        prop_assert!(cauchy_loss(&[r.abs() + 0.5], gamma).unwrap() > a);
    }

    #[test]
    fn discrepancy_is_finite_and_nonnegative(n in 2usize..8, m in 2usize..8, seed in 0u64..1000) {
        let c = cells(n, m, 0.6, seed);
        let (gu, gs) = gdi_from_slice(n, m, &common::as_records(&c, 0));
        prop_assert!(gu.iter().chain(&gs).all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn labeled_count_shrinks_as_c_grows(values in prop::collection::vec(0.0f64..10.0, 3..30), c in 0.0f64..3.0) {
        let active = vec![true; values.len()];
        let lo = label_step(&values, &active, c).0.iter().filter(|&&b| b).count();
        let hi = label_step(&values, &active, c + 0.5).0.iter().filter(|&&b| b).count();
        prop_assert!(hi <= lo);
    }

    #[test]
    fn hypergraph_matrices_symmetric_nonnegative(n in 1usize..7, m in 1usize..7, seed in 0u64..1000) {
        let recs = common::as_records(&cells(n, m, 0.5, seed), 0);
        let t = SparseQoSTensor::new(Dims::new(n, m, 1), recs).unwrap();
        let s = build_snapshot(&t, 0).unwrap();
        for a in [&s.a, &s.a_u, &s.a_s, &s.a_hat, &s.a_u_hat, &s.a_s_hat] {
            prop_assert!(common::is_symmetric(a, 1e-12));
            prop_assert!(a.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn forest_scores_in_unit_interval(xs in prop::collection::vec(-10.0f64..10.0, 2..120), seed in 0u64..100) {
        let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let cfg = ForestConfig { n_trees: 20, seed, ..Default::default() };
        let scores = fit_score(&pts, &cfg).unwrap();
        prop_assert!(scores.iter().all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn removal_count_is_exact(n in 1usize..150, lambda in 0.0f64..=50.0) {
        let recs: Vec<QoSRecord> = (0..n).map(|i| QoSRecord::new(i % 7, i / 7, i % 3, (i * 37 % 11) as f64)).collect();
        let cfg = ForestConfig { n_trees: 10, ..Default::default() };
        let r = remove_outliers(&recs, lambda, &cfg).unwrap();
        let k = (lambda / 100.0 * n as f64 + 1e-9).floor() as usize;
        prop_assert_eq!(r.removed.len(), k);
        prop_assert_eq!(r.kept.len(), n - k);
        prop_assert_eq!(r.removed.iter().collect::<HashSet<_>>().len(), k);
    }

    #[test]
    fn split_partitions_target_slice(psi in 0.1f64..0.9, seed in 0u64..500) {
        let n = 9;
        let recs: Vec<QoSRecord> = (0..5)
            .flat_map(|t| cells(n, 8, 0.7, seed + t as u64).into_iter().map(move |(u, s, q)| QoSRecord::new(u, s, t, q)))
            .collect();
        let tensor = SparseQoSTensor::new(Dims::new(n, 8, 5), recs).unwrap();
        let split = make_split(&tensor, &SplitSpec::new(psi, 4, 4, seed)).unwrap();
        let key = |r: &QoSRecord| (r.user, r.service);
        let train: HashSet<_> = split.train_targets().iter().map(key).collect();
        let val: HashSet<_> = split.val.iter().map(key).collect();
        let test: HashSet<_> = split.test.iter().map(key).collect();
        prop_assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        prop_assert_eq!(train.len() + val.len() + test.len(), tensor.slice(4).len());
        prop_assert!(split.test.iter().all(|r| r.time == 4));
    }

    #[test]
    fn local_stats_ignore_order(mut xs in prop::collection::vec(0.0f64..100.0, 1..30), seed in any::<u64>()) {
        let a = local_stats(&xs);
        let len = xs.len();
        xs.rotate_left((seed as usize) % len);
        xs.reverse();
        let b = local_stats(&xs);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn nmf_objective_never_rises(n in 2usize..8, m in 2usize..8, seed in 0u64..200) {
        let recs = common::as_records(&cells(n, m, 0.6, seed), 0);
        let cfg = NmfConfig { rank: 2, max_iters: 40, tol: 0.0, seed, ..Default::default() };
        let r = masked_nmf(n, m, &recs, &cfg).unwrap();
        for w in r.trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
    }
}
