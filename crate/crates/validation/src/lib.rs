//! Independent oracles for checking fsrm-core: exact small-instance
//! transport and assignment solvers, and a finite-difference gradient check.

use std::collections::HashMap;

use fsrm_core::network::{
    gradient_terms, objective_terms, Batch, Mode, NetworkParams, Terms, TrainConfig,
};
use fsrm_core::numcore::{Matrix, RandomStream};

pub fn random_matrix(n: usize, d: usize, stream: &mut RandomStream) -> Matrix {
    Matrix::from_vec(n, d, (0..n * d).map(|_| stream.standard_normal()).collect()).unwrap()
}

/// Each objective term on its own.
pub const SINGLE_TERMS: [(&str, Terms); 5] = [
    (
        "treatment",
        Terms {
            treatment: true,
            ..Terms::NONE
        },
    ),
    (
        "outcome",
        Terms {
            outcome: true,
            ..Terms::NONE
        },
    ),
    (
        "ipm",
        Terms {
            ipm: true,
            ..Terms::NONE
        },
    ),
    (
        "elastic_net",
        Terms {
            elastic_net: true,
            ..Terms::NONE
        },
    ),
    (
        "prediction_l2",
        Terms {
            prediction_l2: true,
            ..Terms::NONE
        },
    ),
];

#[derive(Debug, Default)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree, i.e. a ReLU or L1
    /// kink lies within the step.
    pub skipped_kinks: usize,
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

/// A random small network, batch and configuration: at most three
/// representation layers, widths and batch size at most 8, dropout off.
pub fn random_case(seed: u64) -> (NetworkParams, TrainConfig, Matrix, Vec<bool>, Vec<f64>) {
    let mut s = RandomStream::new(seed);
    let input = 2 + s.below(5);
    let n_layers = 1 + s.below(3);
    let config = TrainConfig {
        delta: 0.2 + 2.0 * s.uniform(),
        gamma: 0.2 + 2.0 * s.uniform(),
        lambda_l2: 0.05 + s.uniform(),
        alpha_l1: 0.05 + s.uniform(),
        beta: 0.05 + s.uniform(),
        layer_dims: (0..n_layers).map(|_| 2 + s.below(7)).collect(),
        pred_layers: s.below(3),
        pred_width: 2 + s.below(7),
        feature_selection: s.below(4) != 0,
        dropout_rate: 0.0,
        sinkhorn_eps: 0.3 + s.uniform(),
        sinkhorn_iters: 5 + s.below(20),
        ..TrainConfig::default()
    };
    let mut params = NetworkParams::init(input, &config, &mut s);
    // move every parameter off its initial value, keeping it away from 0
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            let jitter = 0.1 + 0.4 * s.uniform();
            *v += if s.bernoulli(0.5) { jitter } else { -jitter };
        }
    }
    let n = 4 + s.below(5);
    let x = random_matrix(n, input, &mut s);
    let mut t: Vec<bool> = (0..n).map(|_| s.bernoulli(0.5)).collect();
    t[0] = true;
    t[1] = false;
    let y = (0..n).map(|_| s.standard_normal()).collect();
    (params, config, x, t, y)
}

fn eval_term(params: &NetworkParams, batch: &Batch<'_>, config: &TrainConfig, terms: Terms) -> f64 {
    objective_terms(
        params,
        batch,
        config,
        Mode::Eval,
        terms,
        &mut RandomStream::new(0),
    )
    .unwrap()
    .total
}

/// Compares the analytic gradient of every single term with central
/// differences at every parameter of the case generated from `seed`.
pub fn gradient_check(seed: u64) -> GradCheck {
    let (params, config, x, t, y) = random_case(seed);
    let batch = Batch {
        x: &x,
        t: &t,
        y: &y,
    };
    let mut out = GradCheck::default();
    for (name, terms) in SINGLE_TERMS {
        let (grads, _) = gradient_terms(
            &params,
            &batch,
            &config,
            Mode::Eval,
            terms,
            &mut RandomStream::new(0),
        )
        .unwrap();
        let analytic = grads.to_flat();
        let base = eval_term(&params, &batch, &config, terms);
        let mut probe = params.clone();
        let mut k = 0;
        let n_tensors = probe.tensors().len();
        for ti in 0..n_tensors {
            let len = probe.tensors()[ti].len();
            for e in 0..len {
                let orig = probe.tensors()[ti][e];
                probe.tensors_mut()[ti][e] = orig + FD_STEP;
                let plus = eval_term(&probe, &batch, &config, terms);
                probe.tensors_mut()[ti][e] = orig - FD_STEP;
                let minus = eval_term(&probe, &batch, &config, terms);
                probe.tensors_mut()[ti][e] = orig;

                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let right = (plus - base) / FD_STEP;
                let left = (base - minus) / FD_STEP;
                let a = analytic[k];
                k += 1;
                if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1e-2) {
                    out.skipped_kinks += 1;
                    continue;
                }
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                out.checked += 1;
                if err > out.max_rel_err {
                    out.max_rel_err = err;
                    out.worst = format!("seed {seed} term {name} tensor {ti} entry {e}: analytic {a:e} numeric {numeric:e}");
                }
            }
        }
        assert_eq!(k, analytic.len());
    }
    out
}

/// Exact optimal transport between uniform measures on `n` and `m` points.
///
/// Splitting every source point into `m` copies and every target into `n`
/// copies turns the problem into an assignment problem with repeated rows
/// and columns; a dynamic program over how many copies of each target are
/// used solves it exactly.
pub fn exact_uniform_ot(cost: &Matrix) -> f64 {
    let (n, m) = cost.shape();
    let mut memo: HashMap<Vec<u8>, f64> = HashMap::new();
    fn solve(
        used: &mut Vec<u8>,
        cost: &Matrix,
        n: usize,
        m: usize,
        memo: &mut HashMap<Vec<u8>, f64>,
    ) -> f64 {
        let done: usize = used.iter().map(|&u| u as usize).sum();
        if done == n * m {
            return 0.0;
        }
        if let Some(&v) = memo.get(used) {
            return v;
        }
        // the next source copy belongs to source point done / m
        let i = done / m;
        let mut best = f64::INFINITY;
        for j in 0..m {
            if (used[j] as usize) < n {
                used[j] += 1;
                let v = cost.get(i, j) + solve(used, cost, n, m, memo);
                used[j] -= 1;
                best = best.min(v);
            }
        }
        memo.insert(used.clone(), best);
        best
    }
    let total = solve(&mut vec![0u8; m], cost, n, m, &mut memo);
    total / (n * m) as f64
}

/// Minimum total cost over all ways of pairing every row of the smaller side
/// with a distinct column (or vice versa), by enumeration.
pub fn brute_force_assignment(cost: &Matrix) -> f64 {
    let (r, c) = cost.shape();
    let (small, large, transposed) = if r <= c { (r, c, false) } else { (c, r, true) };
    let get = |a: usize, b: usize| {
        if transposed {
            cost.get(b, a)
        } else {
            cost.get(a, b)
        }
    };
    fn rec(
        k: usize,
        small: usize,
        large: usize,
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
        get: &dyn Fn(usize, usize) -> f64,
    ) {
        if k == small {
            *best = best.min(acc);
            return;
        }
        for b in 0..large {
            if !used[b] {
                used[b] = true;
                rec(k + 1, small, large, used, acc + get(k, b), best, get);
                used[b] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(
        0,
        small,
        large,
        &mut vec![false; large],
        0.0,
        &mut best,
        &get,
    );
    best
}
