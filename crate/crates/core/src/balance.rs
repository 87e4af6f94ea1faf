//! Wasserstein imbalance between treated and control representations via
//! entropic optimal transport, with gradients.

use serde::{Deserialize, Serialize};

use crate::error::{FsrmError, Result};
use crate::numcore::Matrix;

/// How [`wasserstein_grad`] treats the transport plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    /// Differentiate through every Sinkhorn iteration.
    Unrolled,
    /// Hold the plan fixed and differentiate the cost matrix only.
    Envelope,
}

/// Relative marginal violation below which a plan counts as converged.
const MARGINAL_TOL: f64 = 1e-6;

/// Scaling iterations between re-absorptions of the scaling vectors into the
/// potentials.
const ABSORB_EVERY: usize = 20;

/// Scaling factors outside this range trigger a re-absorption.
const SCALING_RANGE: (f64, f64) = (1e-150, 1e150);

/// How one Sinkhorn iteration was carried out, kept for the backward pass.
#[derive(Clone, Debug)]
enum Step {
    /// Log-domain update. `rows` is the row-normalized kernel of the f update
    /// (n × m), `cols` the column-normalized kernel of the g update stored
    /// transposed (m × n).
    Log { rows: Vec<f64>, cols: Vec<f64> },
    /// Scaling update against `kernels[kernel]`, with `u` and `v` the new
    /// scalings and `v_prev` the column scaling the f update saw.
    Scaled {
        kernel: usize,
        u: Vec<f64>,
        v_prev: Vec<f64>,
        v: Vec<f64>,
    },
}

/// Result of [`sinkhorn_wasserstein`].
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub cost: f64,
    pub converged: bool,
    pub iterations_used: usize,
    eps: f64,
    cost_matrix: Matrix,
    // dual potentials (f^k, g^k) after iteration k = 1..=iters
    trace: Vec<(Vec<f64>, Vec<f64>)>,
    steps: Vec<Step>,
    // exp((F_i + G_j - C_ij)/eps) for absorbed potentials (F, G), n × m
    kernels: Vec<Vec<f64>>,
}

impl TransportPlan {
    pub fn cost_matrix(&self) -> &Matrix {
        &self.cost_matrix
    }

    /// Entropic dual objective after each iteration.
    pub fn dual_objective_trace(&self) -> Vec<f64> {
        let (n, m) = self.cost_matrix.shape();
        let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
        self.trace
            .iter()
            .map(|(f, g)| {
                let mut mass = 0.0;
                for i in 0..n {
                    let c = self.cost_matrix.row(i);
                    for j in 0..m {
                        mass += ((f[i] + g[j] - c[j]) / self.eps).exp();
                    }
                }
                a * f.iter().sum::<f64>() + b * g.iter().sum::<f64>() - self.eps * mass
            })
            .collect()
    }
}

/// Pairwise Euclidean distances between rows.
pub fn euclidean_cost(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let u = a.row(i);
        for j in 0..b.rows() {
            let d2: f64 = u.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            c.set(i, j, d2.sqrt());
        }
    }
    c
}

/// Writes `softmax(values)` into `out` and returns `log Σ exp(values)`.
#[inline]
fn softmax_into(values: impl Iterator<Item = f64>, out: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (o, v) in out.iter_mut().zip(values) {
        *o = v;
        max = max.max(v);
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    max + sum.ln()
}

fn in_range(v: &[f64]) -> bool {
    v.iter()
        .all(|&x| x >= SCALING_RANGE.0 && x <= SCALING_RANGE.1)
}

/// One scaling iteration `u = a / K v`, `v = b / Kᵀ u`; `None` when a
/// scaling factor leaves the safe range.
fn scaled_step(
    kernel: &[f64],
    v: &[f64],
    a: f64,
    b: f64,
    n: usize,
    m: usize,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let u: Vec<f64> = (0..n)
        .map(|i| {
            a / kernel[i * m..(i + 1) * m]
                .iter()
                .zip(v)
                .map(|(k, vj)| k * vj)
                .sum::<f64>()
        })
        .collect();
    if !in_range(&u) {
        return None;
    }
    let mut col = vec![0.0; m];
    for (i, ui) in u.iter().enumerate() {
        for (c, k) in col.iter_mut().zip(&kernel[i * m..(i + 1) * m]) {
            *c += k * ui;
        }
    }
    let v_new: Vec<f64> = col.iter().map(|c| b / c).collect();
    in_range(&v_new).then_some((u, v_new))
}

fn absorbed_kernel(f: &[f64], g: &[f64], cost: &Matrix, eps: f64) -> Vec<f64> {
    let m = g.len();
    let mut k = vec![0.0; f.len() * m];
    for (i, fi) in f.iter().enumerate() {
        for ((kij, gj), cij) in k[i * m..(i + 1) * m].iter_mut().zip(g).zip(cost.row(i)) {
            *kij = ((fi + gj - cij) / eps).exp();
        }
    }
    k
}

/// Entropic OT between the uniform empirical measures on the rows of
/// `treated` and `control`, ground cost Euclidean, `iters` Sinkhorn
/// iterations at regularization `eps`.
///
/// Iterations run on scaling vectors against a kernel built from the current
/// potentials, which are re-absorbed periodically or whenever a scaling
/// factor leaves a safe range; if that still fails the iteration is done in
/// the log domain. Every variant computes the same update.
pub fn sinkhorn_wasserstein(
    treated: &Matrix,
    control: &Matrix,
    eps: f64,
    iters: usize,
) -> Result<TransportPlan> {
    let (n, m) = (treated.rows(), control.rows());
    if n == 0 || m == 0 {
        return Err(FsrmError::invalid("sinkhorn needs two nonempty point sets"));
    }
    if treated.cols() != control.cols() {
        return Err(FsrmError::invalid(format!(
            "point sets differ in dimension: {} vs {}",
            treated.cols(),
            control.cols()
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(FsrmError::invalid(format!(
            "sinkhorn eps = {eps} must be > 0"
        )));
    }
    if iters == 0 {
        return Err(FsrmError::invalid("sinkhorn needs at least one iteration"));
    }
    let cost = euclidean_cost(treated, control);
    let cost_t = cost.transpose();
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let (log_a, log_b) = (a.ln(), b.ln());

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut trace = Vec::with_capacity(iters);
    let mut steps = Vec::with_capacity(iters);
    let mut kernels: Vec<Vec<f64>> = Vec::new();
    // active kernel with its absorbed potentials and the current column scaling
    let mut active: Option<(usize, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut since_absorb = 0;

    for k in 0..iters {
        if since_absorb >= ABSORB_EVERY {
            active = None;
        }
        if active.is_none() && k > 0 {
            kernels.push(absorbed_kernel(&f, &g, &cost, eps));
            active = Some((kernels.len() - 1, f.clone(), g.clone(), vec![1.0; m]));
            since_absorb = 0;
        }
        let scaled = active
            .as_ref()
            .and_then(|(kk, _, _, v)| scaled_step(&kernels[*kk], v, a, b, n, m));
        match (scaled, active.as_mut()) {
            (Some((u, v_new)), Some((kk, base_f, base_g, v))) => {
                for ((fi, bf), ui) in f.iter_mut().zip(base_f.iter()).zip(&u) {
                    *fi = bf + eps * ui.ln();
                }
                for ((gj, bg), vj) in g.iter_mut().zip(base_g.iter()).zip(&v_new) {
                    *gj = bg + eps * vj.ln();
                }
                let v_prev = std::mem::replace(v, v_new.clone());
                steps.push(Step::Scaled {
                    kernel: *kk,
                    u,
                    v_prev,
                    v: v_new,
                });
                since_absorb += 1;
            }
            _ => {
                let mut rows = vec![0.0; n * m];
                let mut cols = vec![0.0; m * n];
                for (i, fi) in f.iter_mut().enumerate() {
                    let c = cost.row(i);
                    let lse = softmax_into(
                        g.iter().zip(c).map(|(gj, cij)| (gj - cij) / eps),
                        &mut rows[i * m..(i + 1) * m],
                    );
                    *fi = eps * log_a - eps * lse;
                }
                for (j, gj) in g.iter_mut().enumerate() {
                    let c = cost_t.row(j);
                    let lse = softmax_into(
                        f.iter().zip(c).map(|(fi, cij)| (fi - cij) / eps),
                        &mut cols[j * n..(j + 1) * n],
                    );
                    *gj = eps * log_b - eps * lse;
                }
                steps.push(Step::Log { rows, cols });
                active = None;
            }
        }
        trace.push((f.clone(), g.clone()));
    }

    let mut plan = Matrix::zeros(n, m);
    let mut total = 0.0;
    for i in 0..n {
        let c = cost.row(i);
        let p = plan.row_mut(i);
        for j in 0..m {
            p[j] = ((f[i] + g[j] - c[j]) / eps).exp();
            total += p[j] * c[j];
        }
    }
    let row_err = (0..n)
        .map(|i| (plan.row(i).iter().sum::<f64>() * n as f64 - 1.0).abs())
        .fold(0.0, f64::max);
    let col_err = (0..m)
        .map(|j| ((0..n).map(|i| plan.get(i, j)).sum::<f64>() * m as f64 - 1.0).abs())
        .fold(0.0, f64::max);

    Ok(TransportPlan {
        plan,
        cost: total,
        converged: row_err.max(col_err) <= MARGINAL_TOL,
        iterations_used: iters,
        eps,
        cost_matrix: cost,
        trace,
        steps,
        kernels,
    })
}

/// Gradient of the transport cost with respect to both point sets.
#[derive(Clone, Debug)]
pub struct WassersteinGrad {
    pub treated: Matrix,
    pub control: Matrix,
}

/// Adjoint of the transport cost with respect to the cost matrix.
fn cost_matrix_adjoint(tp: &TransportPlan, mode: GradientMode) -> Matrix {
    let c = &tp.cost_matrix;
    let (n, m) = c.shape();
    let eps = tp.eps;
    if mode == GradientMode::Envelope {
        return tp.plan.clone();
    }
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);

    // cost = Σ P_ij C_ij, P_ij = exp((f_i + g_j - C_ij)/eps)
    let mut c_bar = Matrix::zeros(n, m);
    let mut f_bar = vec![0.0; n];
    let mut g_bar = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let p = tp.plan.get(i, j);
            let cij = c.get(i, j);
            c_bar.set(i, j, p * (1.0 - cij / eps));
            f_bar[i] += p * cij / eps;
            g_bar[j] += p * cij / eps;
        }
    }

    // Each iteration is f_i = eps log a_i - eps LSE_j((g_prev_j - C_ij)/eps)
    // followed by g_j = eps log b_j - eps LSE_i((f_i - C_ij)/eps). The
    // softmax weights of the two LSEs are the row- and column-normalized
    // kernels; their adjoints flow into C and into the other potential.
    let mut col_w = vec![0.0; m];
    let mut row_w = vec![0.0; n];
    for step in tp.steps.iter().rev() {
        // g update
        for i in 0..n {
            let cb = c_bar.row_mut(i);
            let mut acc = 0.0;
            match step {
                Step::Log { cols, .. } => {
                    for j in 0..m {
                        let w = g_bar[j] * cols[j * n + i];
                        acc += w;
                        cb[j] += w;
                    }
                }
                Step::Scaled { kernel, u, v, .. } => {
                    if i == 0 {
                        for j in 0..m {
                            col_w[j] = g_bar[j] * v[j] / b;
                        }
                    }
                    let k = &tp.kernels[*kernel][i * m..(i + 1) * m];
                    for j in 0..m {
                        let w = col_w[j] * k[j] * u[i];
                        acc += w;
                        cb[j] += w;
                    }
                }
            }
            f_bar[i] -= acc;
        }

        // f update
        g_bar.iter_mut().for_each(|v| *v = 0.0);
        if let Step::Scaled { u, .. } = step {
            for i in 0..n {
                row_w[i] = f_bar[i] * u[i] / a;
            }
        }
        for i in 0..n {
            let cb = c_bar.row_mut(i);
            match step {
                Step::Log { rows, .. } => {
                    let fb = f_bar[i];
                    let pi = &rows[i * m..(i + 1) * m];
                    for j in 0..m {
                        let w = fb * pi[j];
                        cb[j] += w;
                        g_bar[j] -= w;
                    }
                }
                Step::Scaled { kernel, v_prev, .. } => {
                    let k = &tp.kernels[*kernel][i * m..(i + 1) * m];
                    let rw = row_w[i];
                    for j in 0..m {
                        let w = rw * k[j] * v_prev[j];
                        cb[j] += w;
                        g_bar[j] -= w;
                    }
                }
            }
        }
        f_bar.iter_mut().for_each(|v| *v = 0.0);
    }
    c_bar
}

/// Gradient of `plan.cost` with respect to the coordinates of both point sets.
///
/// `Unrolled` differentiates through the stored Sinkhorn iterations;
/// `Envelope` treats the plan as constant.
pub fn wasserstein_grad(
    plan: &TransportPlan,
    treated: &Matrix,
    control: &Matrix,
    mode: GradientMode,
) -> WassersteinGrad {
    let c_bar = cost_matrix_adjoint(plan, mode);
    let c = &plan.cost_matrix;
    let dim = treated.cols();
    let mut gt = Matrix::zeros(treated.rows(), dim);
    let mut gc = Matrix::zeros(control.rows(), dim);
    for i in 0..treated.rows() {
        let u = treated.row(i);
        for j in 0..control.rows() {
            let dist = c.get(i, j);
            if dist == 0.0 {
                continue;
            }
            let w = c_bar.get(i, j) / dist;
            if w == 0.0 {
                continue;
            }
            let v = control.row(j);
            for k in 0..dim {
                let diff = w * (u[k] - v[k]);
                gt.as_mut_slice()[i * dim + k] += diff;
                gc.as_mut_slice()[j * dim + k] -= diff;
            }
        }
    }
    WassersteinGrad {
        treated: gt,
        control: gc,
    }
}
