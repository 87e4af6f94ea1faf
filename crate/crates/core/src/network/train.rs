use std::fs;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use super::objective::{backward, total_objective, Batch, ObjectiveBreakdown};
use super::{adam_step, forward, AdamState, ForwardResult, Mode, NetworkParams, TrainConfig};
use crate::datagen::Dataset;
use crate::error::{FsrmError, Result};
use crate::numcore::{Matrix, RandomStream};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Per-column affine standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per column; constant columns get
    /// scale 1 so they map to 0.
    pub fn fit(x: &Matrix) -> Standardizer {
        let mean = x.column_means();
        let n = x.rows().max(1) as f64;
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for ((v, xv), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *v += (xv - m) * (xv - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(FsrmError::invalid(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Parameters plus everything needed to reproduce forward passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub params: NetworkParams,
    pub standardizer: Standardizer,
    pub config: TrainConfig,
}

impl TrainedModel {
    /// Eval-mode forward pass on raw (unstandardized) covariates.
    pub fn predict(&self, x: &Matrix, t: &[bool]) -> Result<ForwardResult> {
        let xs = self.standardizer.apply(x)?;
        forward(&self.params, &xs, t, Mode::Eval, &mut RandomStream::new(0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel> {
        let model: TrainedModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        if model.format_version != CHECKPOINT_VERSION {
            return Err(FsrmError::invalid(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                model.format_version
            )));
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's minibatches.
    pub train: ObjectiveBreakdown,
    pub val: ObjectiveBreakdown,
    /// Lowest validation objective seen so far, including initialization.
    pub best_val_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    /// Epoch of the returned checkpoint; `None` means the initialization.
    pub best_epoch: Option<usize>,
    pub best_val: ObjectiveBreakdown,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Stratified train/validation split; each group keeps at least one training
/// unit and contributes at least one validation unit when it has two or more.
fn split(ds: &Dataset, val_fraction: f64, stream: &mut RandomStream) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut group in [ds.treated_indices(), ds.control_indices()] {
        stream.shuffle(&mut group);
        let n = group.len();
        let k = if n >= 2 {
            ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1)
        } else {
            0
        };
        val.extend_from_slice(&group[..k]);
        train.extend_from_slice(&group[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn mean_breakdown(items: &[ObjectiveBreakdown]) -> ObjectiveBreakdown {
    let n = items.len().max(1) as f64;
    let mut out = ObjectiveBreakdown::default();
    for b in items {
        out.treatment += b.treatment / n;
        out.outcome += b.outcome / n;
        out.ipm += b.ipm / n;
        out.elastic_net += b.elastic_net / n;
        out.prediction_l2 += b.prediction_l2 / n;
        out.total += b.total / n;
        out.outcome_mse += b.outcome_mse / n;
        out.ipm_skipped |= b.ipm_skipped;
    }
    out
}

fn nan_to_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Trains the network with Adam on minibatches, keeping the parameters with
/// the lowest validation objective and stopping after `patience` epochs
/// without improvement.
pub fn train(
    config: &TrainConfig,
    ds: &Dataset,
    stream: &mut RandomStream,
) -> Result<TrainOutcome> {
    config.validate()?;
    ds.validate()?;
    let n_t = ds.n_treated();
    if n_t == 0 || n_t == ds.n() {
        return Err(FsrmError::invalid(
            "training needs both treated and control units",
        ));
    }
    let mut split_stream = stream.split(1);
    let mut init_stream = stream.split(2);
    let mut batch_stream = stream.split(3);
    let mut dropout_stream = stream.split(4);

    let (train_idx, val_idx) = split(ds, config.val_fraction, &mut split_stream);
    let standardizer = Standardizer::fit(&ds.x.select_rows(&train_idx));
    let x = standardizer.apply(&ds.x)?;
    let x_val = x.select_rows(&val_idx);
    let t_val: Vec<bool> = val_idx.iter().map(|&i| ds.t[i]).collect();
    let y_val: Vec<f64> = val_idx.iter().map(|&i| ds.y_f[i]).collect();
    let val_batch = Batch {
        x: &x_val,
        t: &t_val,
        y: &y_val,
    };

    let mut params = NetworkParams::init(ds.d(), config, &mut init_stream);
    let eval_val = |p: &NetworkParams| -> Result<ObjectiveBreakdown> {
        total_objective(p, &val_batch, config, Mode::Eval, &mut RandomStream::new(0))
    };
    let mut best_params = params.clone();
    let mut best_val = eval_val(&params)?;
    let mut best_total = nan_to_inf(best_val.total);
    let mut best_epoch = None;
    let mut history = Vec::new();
    let mut state = AdamState::new(&params);
    let mut since_best = 0;
    let mut order = train_idx.clone();

    for epoch in 0..config.max_epochs {
        batch_stream.shuffle(&mut order);
        let mut terms = Vec::new();
        let mut diverged = false;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let xb = x.select_rows(chunk);
            let tb: Vec<bool> = chunk.iter().map(|&i| ds.t[i]).collect();
            let yb: Vec<f64> = chunk.iter().map(|&i| ds.y_f[i]).collect();
            let batch = Batch {
                x: &xb,
                t: &tb,
                y: &yb,
            };
            let (grads, br) = backward(&params, &batch, config, &mut dropout_stream)?;
            if !br.total.is_finite() || !grads.all_finite() {
                diverged = true;
                break;
            }
            adam_step(&mut params, &grads, &mut state, config);
            terms.push(br);
        }
        if diverged || !params.all_finite() {
            debug!("training diverged at epoch {epoch}");
            break;
        }
        let val = eval_val(&params)?;
        let val_total = nan_to_inf(val.total);
        if val_total < best_total {
            best_total = val_total;
            best_val = val;
            best_params = params.clone();
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(EpochRecord {
            epoch,
            train: mean_breakdown(&terms),
            val,
            best_val_total: best_total,
        });
        if since_best >= config.patience {
            debug!("early stop at epoch {epoch}, best epoch {best_epoch:?}");
            break;
        }
    }

    Ok(TrainOutcome {
        model: TrainedModel {
            format_version: CHECKPOINT_VERSION,
            params: best_params,
            standardizer,
            config: config.clone(),
        },
        history,
        best_epoch,
        best_val,
        train_idx,
        val_idx,
    })
}
