//! Treatment-effect estimates, error metrics and feature importance.

use serde::{Deserialize, Serialize};

use crate::datagen::{BlockLabel, Dataset};
use crate::error::{FsrmError, Result};
use crate::matching::MatchResult;
use crate::network::NetworkParams;

#[derive(Clone, Debug, PartialEq)]
pub struct EffectEstimates {
    pub ite_hat: Vec<f64>,
    pub ate_hat: f64,
    pub ite_true: Option<Vec<f64>>,
    pub ate_true: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eps_ate: f64,
    pub pehe: f64,
    pub sqrt_pehe: f64,
    pub n_units: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// ITE per unit from factual and imputed counterfactual outcomes.
pub fn estimate_effects(ds: &Dataset, mr: &MatchResult) -> Result<EffectEstimates> {
    estimate_from_counterfactuals(ds, &mr.cf_outcome)
}

pub fn estimate_from_counterfactuals(ds: &Dataset, cf_outcome: &[f64]) -> Result<EffectEstimates> {
    if cf_outcome.len() != ds.n() {
        return Err(FsrmError::invalid(format!(
            "{} counterfactuals for {} units",
            cf_outcome.len(),
            ds.n()
        )));
    }
    if ds.n() == 0 {
        return Err(FsrmError::invalid("no units to estimate effects for"));
    }
    let ite_hat: Vec<f64> = (0..ds.n())
        .map(|i| {
            if ds.t[i] {
                ds.y_f[i] - cf_outcome[i]
            } else {
                cf_outcome[i] - ds.y_f[i]
            }
        })
        .collect();
    let ite_true = ds.true_ite();
    Ok(EffectEstimates {
        ate_hat: mean(&ite_hat),
        ate_true: ite_true.as_deref().map(mean),
        ite_hat,
        ite_true,
    })
}

/// `|ATE - ATE_hat|` and PEHE against the ground truth carried by `est`.
pub fn metrics(est: &EffectEstimates) -> Result<MetricReport> {
    let (Some(ite), Some(ate)) = (&est.ite_true, est.ate_true) else {
        return Err(FsrmError::invalid("metrics need ground-truth effects"));
    };
    if ite.len() != est.ite_hat.len() {
        return Err(FsrmError::invalid("true and estimated ITE lengths differ"));
    }
    let pehe = ite
        .iter()
        .zip(&est.ite_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / ite.len() as f64;
    Ok(MetricReport {
        eps_ate: (ate - est.ate_hat).abs(),
        pehe,
        sqrt_pehe: pehe.sqrt(),
        n_units: ite.len(),
    })
}

/// `|d_j| / max_k |d_k|` over the one-to-one selection weights.
pub fn feature_importance(params: &NetworkParams) -> Result<Vec<f64>> {
    let d = params
        .selection
        .as_ref()
        .ok_or_else(|| FsrmError::invalid("network has no feature-selection layer"))?;
    let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Ok(vec![0.0; d.len()]);
    }
    Ok(d.iter().map(|v| v.abs() / max).collect())
}

/// Mean importance over the columns carrying `label`, if any do.
pub fn mean_importance(
    importance: &[f64],
    labels: &[BlockLabel],
    label: BlockLabel,
) -> Option<f64> {
    let vals: Vec<f64> = importance
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == label)
        .map(|(v, _)| *v)
        .collect();
    (!vals.is_empty()).then(|| mean(&vals))
}
