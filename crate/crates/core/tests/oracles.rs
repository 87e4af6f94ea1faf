use fsrm_core::balance::sinkhorn_wasserstein;
use fsrm_core::matching::optimal_assignment;
use fsrm_core::numcore::{Matrix, RandomStream};
use fsrm_validation::{brute_force_assignment, exact_uniform_ot, random_matrix};

fn integer_costs(r: usize, c: usize, s: &mut RandomStream) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| s.below(50) as f64).collect()).unwrap()
}

#[test]
fn assignment_matches_enumeration() {
    let mut s = RandomStream::new(1);
    for _ in 0..200 {
        let small = 1 + s.below(7);
        let large = small + s.below(3);
        let (r, c) = if s.bernoulli(0.5) {
            (small, large)
        } else {
            (large, small)
        };
        let cost = integer_costs(r, c, &mut s);
        let a = optimal_assignment(&cost).unwrap();
        assert_eq!(a.total, brute_force_assignment(&cost), "{r}x{c}");
        assert_eq!(a.pairs.len(), r.min(c));
        let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!((rows.len(), cols.len()), (r.min(c), r.min(c)));
    }
}

#[test]
fn converged_sinkhorn_matches_exact_transport() {
    let mut s = RandomStream::new(2);
    for _ in 0..50 {
        let n = 1 + s.below(5);
        let m = 1 + s.below(5);
        let d = 1 + s.below(3);
        let a = random_matrix(n, d, &mut s);
        let b = random_matrix(m, d, &mut s);
        let exact = exact_uniform_ot(&fsrm_core::balance::euclidean_cost(&a, &b));
        let short = sinkhorn_wasserstein(&a, &b, 1e-3, 2000).unwrap();
        if short.converged {
            assert!(
                (short.cost - exact).abs() <= 0.05 * exact,
                "{n}x{m}: {} vs {exact}",
                short.cost
            );
        }
        let long = sinkhorn_wasserstein(&a, &b, 1e-3, 30000).unwrap();
        assert!(
            (long.cost - exact).abs() <= 0.05 * exact,
            "{n}x{m}: {} vs {exact}",
            long.cost
        );
    }
}
