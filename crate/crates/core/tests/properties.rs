use fsrm_core::balance::sinkhorn_wasserstein;
use fsrm_core::datagen::Dataset;
use fsrm_core::eval::{estimate_from_counterfactuals, metrics};
use fsrm_core::matching::{
    impute_counterfactuals, optimal_assignment, pairwise_cost, CostAux, DistanceMetric,
};
use fsrm_core::numcore::{random_correlation_covariance, Matrix, RandomStream};
use proptest::prelude::*;

fn points(n: usize, d: usize, seed: u64) -> Matrix {
    let mut s = RandomStream::new(seed);
    Matrix::from_vec(n, d, (0..n * d).map(|_| s.standard_normal()).collect()).unwrap()
}

fn rotation(d: usize, seed: u64) -> Matrix {
    // Gram-Schmidt on a random square matrix
    let g = points(d, d, seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v = g.row(i).to_vec();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        q.push(v);
    }
    Matrix::from_rows(&q).unwrap()
}

fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut s = RandomStream::new(seed ^ 0x5eed);
    let x = points(n, d, seed);
    let mut t: Vec<bool> = (0..n).map(|_| s.bernoulli(0.4)).collect();
    t[0] = true;
    t[n - 1] = false;
    let y = (0..n).map(|_| s.standard_normal()).collect();
    let mut ds = Dataset::new(x, t, y).unwrap();
    ds.mu0 = Some((0..n).map(|_| s.standard_normal()).collect());
    ds.mu1 = Some((0..n).map(|_| s.standard_normal()).collect());
    ds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs_random_covariances(dim in 1usize..12, seed in any::<u64>()) {
        let cov = random_correlation_covariance(dim, &mut RandomStream::new(seed)).unwrap();
        let l = cov.cholesky().unwrap();
        prop_assert!(l.matmul_t(&l).max_abs_diff(&cov) < 1e-10);
    }

    #[test]
    fn metric_axioms(seed in any::<u64>(), d in 1usize..5) {
        let p = points(3, d, seed);
        let pooled = points(40, d, seed.wrapping_add(1));
        let scores = [0.2, 0.7, 0.45];
        for metric in DistanceMetric::ALL {
            let aux = match metric {
                DistanceMetric::Euclidean => CostAux::None,
                DistanceMetric::Mahalanobis => CostAux::Pooled(&pooled),
                DistanceMetric::Propensity => CostAux::Scores { a: &scores, b: &scores },
            };
            let c = pairwise_cost(&p, &p, metric, aux).unwrap();
            for i in 0..3 {
                prop_assert!(c.get(i, i).abs() < 1e-12);
                for j in 0..3 {
                    prop_assert!(c.get(i, j) >= 0.0);
                    prop_assert!((c.get(i, j) - c.get(j, i)).abs() < 1e-12);
                    if metric != DistanceMetric::Propensity {
                        for k in 0..3 {
                            prop_assert!(c.get(i, k) <= c.get(i, j) + c.get(j, k) + 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_leaves_euclidean_assignment_cost(seed in any::<u64>(), nt in 1usize..7, nc in 1usize..9, d in 1usize..4) {
        let a = points(nt, d, seed);
        let b = points(nc, d, seed.wrapping_add(7));
        let r = rotation(d, seed.wrapping_add(13));
        let before = optimal_assignment(&pairwise_cost(&a, &b, DistanceMetric::Euclidean, CostAux::None).unwrap()).unwrap();
        let after = optimal_assignment(
            &pairwise_cost(&a.matmul(&r), &b.matmul(&r), DistanceMetric::Euclidean, CostAux::None).unwrap(),
        )
        .unwrap();
        prop_assert!((before.total - after.total).abs() < 1e-9);
    }

    #[test]
    fn donors_come_from_the_other_group(seed in any::<u64>(), n in 3usize..30) {
        let ds = dataset(n, 2, seed);
        let p: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        for metric in DistanceMetric::ALL {
            let mr = impute_counterfactuals(&ds, &ds.x, metric, Some(&p)).unwrap();
            for i in 0..n {
                prop_assert_ne!(ds.t[i], ds.t[mr.cf_source[i]]);
                prop_assert_eq!(mr.cf_outcome[i], ds.y_f[mr.cf_source[i]]);
                if let Some(q) = mr.pair_partner[i] {
                    prop_assert_eq!(mr.pair_partner[q], Some(i));
                    prop_assert_eq!(mr.cf_source[i], q);
                }
            }
            prop_assert_eq!(mr.pairs.len(), ds.n_treated().min(n - ds.n_treated()));
        }
    }

    #[test]
    fn ate_shifts_linearly_with_treated_counterfactuals(seed in any::<u64>(), n in 2usize..40, c in -5.0f64..5.0) {
        let ds = dataset(n, 1, seed);
        let cf: Vec<f64> = points(n, 1, seed.wrapping_add(3)).into_vec();
        let shifted: Vec<f64> = cf.iter().enumerate().map(|(i, v)| if ds.t[i] { v + c } else { *v }).collect();
        let a = estimate_from_counterfactuals(&ds, &cf).unwrap();
        let b = estimate_from_counterfactuals(&ds, &shifted).unwrap();
        let expected = -c * ds.n_treated() as f64 / n as f64;
        prop_assert!((b.ate_hat - a.ate_hat - expected).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_unit_order(seed in any::<u64>(), n in 2usize..40) {
        let ds = dataset(n, 1, seed);
        let cf: Vec<f64> = points(n, 1, seed.wrapping_add(5)).into_vec();
        let mut order: Vec<usize> = (0..n).collect();
        RandomStream::new(seed).shuffle(&mut order);
        let perm = ds.subset(&order);
        let cf_perm: Vec<f64> = order.iter().map(|&i| cf[i]).collect();
        let m1 = metrics(&estimate_from_counterfactuals(&ds, &cf).unwrap()).unwrap();
        let m2 = metrics(&estimate_from_counterfactuals(&perm, &cf_perm).unwrap()).unwrap();
        prop_assert!((m1.pehe - m2.pehe).abs() < 1e-12);
        prop_assert!((m1.eps_ate - m2.eps_ate).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_cost_is_nonnegative_and_translation_invariant(seed in any::<u64>(), n in 1usize..12, m in 1usize..12, d in 1usize..4) {
        let a = points(n, d, seed);
        let b = points(m, d, seed.wrapping_add(1));
        let shift: Vec<f64> = points(1, d, seed.wrapping_add(2)).into_vec();
        let move_by = |p: &Matrix| {
            let mut q = p.clone();
            for i in 0..q.rows() {
                q.row_mut(i).iter_mut().zip(&shift).for_each(|(v, s)| *v += 10.0 * s);
            }
            q
        };
        let tp = sinkhorn_wasserstein(&a, &b, 0.1, 100).unwrap();
        let moved = sinkhorn_wasserstein(&move_by(&a), &move_by(&b), 0.1, 100).unwrap();
        prop_assert!(tp.cost >= 0.0);
        prop_assert!((tp.cost - moved.cost).abs() < 1e-9);
    }

    #[test]
    fn sinkhorn_marginals_at_default_settings(seed in any::<u64>(), n in 1usize..20, m in 1usize..20) {
        let tp = sinkhorn_wasserstein(&points(n, 3, seed), &points(m, 3, seed.wrapping_add(9)), 0.1, 100).unwrap();
        // columns are matched exactly by the last half-iteration
        for j in 0..m {
            let col: f64 = (0..n).map(|i| tp.plan.get(i, j)).sum();
            prop_assert!((col * m as f64 - 1.0).abs() < 1e-9);
        }
        let total: f64 = tp.plan.as_slice().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}
