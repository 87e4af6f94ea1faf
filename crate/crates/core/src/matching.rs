//! Counterfactual imputation by optimal matching in representation space.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::balance::euclidean_cost;
use crate::datagen::Dataset;
use crate::error::{FsrmError, Result};
use crate::numcore::{forward_substitute, Matrix};

/// Distance used to compare treated and control units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistanceMetric {
    Euclidean,
    Mahalanobis,
    Propensity,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [
        DistanceMetric::Euclidean,
        DistanceMetric::Mahalanobis,
        DistanceMetric::Propensity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclid",
            DistanceMetric::Mahalanobis => "mahal",
            DistanceMetric::Propensity => "propensity",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistanceMetric {
    type Err = FsrmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclid" | "euclidean" => Ok(DistanceMetric::Euclidean),
            "mahal" | "mahalanobis" => Ok(DistanceMetric::Mahalanobis),
            "propensity" => Ok(DistanceMetric::Propensity),
            other => Err(FsrmError::invalid(format!(
                "unknown metric `{other}` (euclid, mahal, propensity)"
            ))),
        }
    }
}

/// Side information a metric needs beyond the two point sets.
#[derive(Clone, Copy, Debug)]
pub enum CostAux<'a> {
    None,
    /// Sample the Mahalanobis covariance is estimated from.
    Pooled(&'a Matrix),
    /// Propensity scores of the rows of `rep_a` and `rep_b`.
    Scores {
        a: &'a [f64],
        b: &'a [f64],
    },
}

/// Ridge-regularized pooled covariance, factored for whitening.
fn whitening_factor(pooled: &Matrix) -> Result<Matrix> {
    let mut cov = pooled.covariance();
    let dim = cov.rows();
    let trace: f64 = (0..dim).map(|i| cov.get(i, i)).sum();
    let ridge = 1e-6 * trace / dim as f64;
    for i in 0..dim {
        let v = cov.get(i, i) + ridge;
        cov.set(i, i, v);
    }
    cov.cholesky().map_err(|e| {
        FsrmError::Numerical(format!(
            "mahalanobis covariance singular after ridge {ridge:e} (trace {trace:e}, dim {dim}, {} samples): {e}",
            pooled.rows()
        ))
    })
}

fn whiten(points: &Matrix, l: &Matrix) -> Matrix {
    let mut out = points.clone();
    for i in 0..out.rows() {
        forward_substitute(l, out.row_mut(i));
    }
    out
}

/// Pairwise distances between rows of `rep_a` and `rep_b`.
pub fn pairwise_cost(
    rep_a: &Matrix,
    rep_b: &Matrix,
    metric: DistanceMetric,
    aux: CostAux<'_>,
) -> Result<Matrix> {
    if rep_a.cols() != rep_b.cols() {
        return Err(FsrmError::invalid(format!(
            "representation dimensions differ: {} vs {}",
            rep_a.cols(),
            rep_b.cols()
        )));
    }
    match (metric, aux) {
        (DistanceMetric::Euclidean, _) => Ok(euclidean_cost(rep_a, rep_b)),
        (DistanceMetric::Mahalanobis, CostAux::Pooled(pooled)) => {
            if pooled.cols() != rep_a.cols() {
                return Err(FsrmError::invalid("pooled sample has the wrong dimension"));
            }
            let l = whitening_factor(pooled)?;
            Ok(euclidean_cost(&whiten(rep_a, &l), &whiten(rep_b, &l)))
        }
        (DistanceMetric::Propensity, CostAux::Scores { a, b }) => {
            if a.len() != rep_a.rows() || b.len() != rep_b.rows() {
                return Err(FsrmError::invalid(
                    "propensity scores do not match the point sets",
                ));
            }
            let mut c = Matrix::zeros(a.len(), b.len());
            for (i, pa) in a.iter().enumerate() {
                for (j, pb) in b.iter().enumerate() {
                    c.set(i, j, (pa - pb).abs());
                }
            }
            Ok(c)
        }
        (m, _) => Err(FsrmError::invalid(format!(
            "metric {m} is missing its auxiliary input"
        ))),
    }
}

/// Minimum-cost one-to-one matching of size `min(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Exact rectangular assignment by shortest augmenting paths with potentials.
pub fn optimal_assignment(cost: &Matrix) -> Result<Assignment> {
    if cost.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(FsrmError::invalid("assignment costs must be finite"));
    }
    let transposed = cost.rows() > cost.cols();
    let c = if transposed {
        cost.transpose()
    } else {
        cost.clone()
    };
    let (n, m) = c.shape();
    if n == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }

    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let c_row = c.row(i0 - 1);
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = c_row[j - 1] - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, col) = (owner[j] - 1, j - 1);
            if transposed {
                (col, r)
            } else {
                (r, col)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, col)| cost.get(r, col)).sum();
    Ok(Assignment { pairs, total })
}

/// Matched pairs and per-unit imputed counterfactuals.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub metric: DistanceMetric,
    /// `(treated unit, control unit)` dataset indices from the optimal assignment.
    pub pairs: Vec<(usize, usize)>,
    /// Mean distance over `pairs`.
    pub pair_cost: f64,
    pub cf_outcome: Vec<f64>,
    /// Dataset index of the unit whose factual outcome was borrowed.
    pub cf_source: Vec<usize>,
    /// Partner in the optimal assignment, if the unit was paired.
    pub pair_partner: Vec<Option<usize>>,
    /// Distance between each unit and its donor.
    pub distance: Vec<f64>,
}

/// Matches treated and control units on `representation` (one row per unit).
///
/// Units inside an optimal pair take their partner's factual outcome; every
/// other unit takes the factual outcome of its nearest opposite-group unit,
/// lowest index first on ties.
pub fn impute_counterfactuals(
    ds: &Dataset,
    representation: &Matrix,
    metric: DistanceMetric,
    propensity: Option<&[f64]>,
) -> Result<MatchResult> {
    if representation.rows() != ds.n() {
        return Err(FsrmError::invalid(format!(
            "representation has {} rows for {} units",
            representation.rows(),
            ds.n()
        )));
    }
    let treated = ds.treated_indices();
    let control = ds.control_indices();
    if treated.is_empty() || control.is_empty() {
        return Err(FsrmError::invalid(
            "matching needs both treated and control units",
        ));
    }
    let rep_t = representation.select_rows(&treated);
    let rep_c = representation.select_rows(&control);
    let scores_t: Vec<f64>;
    let scores_c: Vec<f64>;
    let aux = match metric {
        DistanceMetric::Euclidean => CostAux::None,
        DistanceMetric::Mahalanobis => CostAux::Pooled(representation),
        DistanceMetric::Propensity => {
            let p =
                propensity.ok_or_else(|| FsrmError::invalid("propensity matching needs scores"))?;
            if p.len() != ds.n() {
                return Err(FsrmError::invalid("one propensity score per unit required"));
            }
            scores_t = treated.iter().map(|&i| p[i]).collect();
            scores_c = control.iter().map(|&i| p[i]).collect();
            CostAux::Scores {
                a: &scores_t,
                b: &scores_c,
            }
        }
    };
    let cost = pairwise_cost(&rep_t, &rep_c, metric, aux)?;
    let assignment = optimal_assignment(&cost)?;

    let n = ds.n();
    let mut cf_source = vec![usize::MAX; n];
    let mut distance = vec![0.0; n];
    let mut pair_partner = vec![None; n];
    let mut pairs = Vec::with_capacity(assignment.pairs.len());
    for &(a, b) in &assignment.pairs {
        let (ti, ci) = (treated[a], control[b]);
        pairs.push((ti, ci));
        pair_partner[ti] = Some(ci);
        pair_partner[ci] = Some(ti);
        cf_source[ti] = ci;
        cf_source[ci] = ti;
        distance[ti] = cost.get(a, b);
        distance[ci] = cost.get(a, b);
    }
    for (a, &ti) in treated.iter().enumerate() {
        if pair_partner[ti].is_none() {
            let (b, d) = argmin(cost.row(a).iter().copied());
            cf_source[ti] = control[b];
            distance[ti] = d;
        }
    }
    for (b, &ci) in control.iter().enumerate() {
        if pair_partner[ci].is_none() {
            let (a, d) = argmin((0..treated.len()).map(|a| cost.get(a, b)));
            cf_source[ci] = treated[a];
            distance[ci] = d;
        }
    }
    let cf_outcome = cf_source.iter().map(|&s| ds.y_f[s]).collect();
    let pair_cost = if pairs.is_empty() {
        0.0
    } else {
        assignment.total / pairs.len() as f64
    };
    Ok(MatchResult {
        metric,
        pairs,
        pair_cost,
        cf_outcome,
        cf_source,
        pair_partner,
        distance,
    })
}

/// First index of the minimum.
fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values.enumerate().fold(
        (0, f64::INFINITY),
        |best, (i, v)| if v < best.1 { (i, v) } else { best },
    )
}
