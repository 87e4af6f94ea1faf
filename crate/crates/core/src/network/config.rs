use serde::{Deserialize, Serialize};

use crate::balance::GradientMode;
use crate::error::{FsrmError, Result};

/// Hyperparameters of the FSRM network and its optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the factual-outcome MSE.
    pub delta: f64,
    /// Weight of the Wasserstein imbalance term.
    pub gamma: f64,
    /// Elastic-net L2 weight on the selection and representation layers.
    pub lambda_l2: f64,
    /// Elastic-net L1 weight on the selection and representation layers.
    pub alpha_l1: f64,
    /// L2 weight on the prediction heads.
    pub beta: f64,
    /// Widths of the fully connected representation layers that follow the
    /// one-to-one selection layer; the last entry is the representation size.
    pub layer_dims: Vec<usize>,
    /// Hidden layers in each prediction head (before its output layer).
    pub pred_layers: usize,
    pub pred_width: usize,
    /// One-to-one selection layer in front of the representation layers.
    pub feature_selection: bool,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
    pub ipm_gradient: GradientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            delta: 1.0,
            gamma: 0.5,
            lambda_l2: 1e-4,
            alpha_l1: 1e-3,
            beta: 1e-4,
            layer_dims: vec![100, 50],
            pred_layers: 1,
            pred_width: 50,
            feature_selection: true,
            batch_size: 100,
            dropout_rate: 0.1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            patience: 30,
            val_fraction: 0.3,
            sinkhorn_eps: 0.1,
            sinkhorn_iters: 100,
            ipm_gradient: GradientMode::Unrolled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("delta", self.delta),
            ("gamma", self.gamma),
            ("lambda_l2", self.lambda_l2),
            ("alpha_l1", self.alpha_l1),
            ("beta", self.beta),
        ];
        for (name, w) in weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(FsrmError::Config(format!(
                    "{name} = {w} must be a finite value >= 0"
                )));
            }
        }
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(FsrmError::Config(
                "layer_dims must be nonempty with positive widths".into(),
            ));
        }
        if self.pred_layers > 0 && self.pred_width == 0 {
            return Err(FsrmError::Config("pred_width must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(FsrmError::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(FsrmError::Config(format!(
                "dropout_rate = {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(FsrmError::Config(format!(
                "val_fraction = {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(FsrmError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return Err(FsrmError::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !(self.sinkhorn_eps > 0.0) || self.sinkhorn_iters == 0 {
            return Err(FsrmError::Config(
                "sinkhorn_eps must be positive and sinkhorn_iters >= 1".into(),
            ));
        }
        Ok(())
    }
}
