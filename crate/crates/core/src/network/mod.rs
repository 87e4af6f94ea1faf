//! The FSRM network: a one-to-one feature-selection layer, fully connected
//! representation layers, a treatment head and two outcome heads.

mod adam;
mod config;
mod forward;
mod objective;
mod train;

use serde::{Deserialize, Serialize};

use crate::numcore::{Matrix, RandomStream};

pub use adam::{adam_step, AdamState};
pub use config::TrainConfig;
pub use forward::{forward, ForwardResult, Mode};
pub use objective::{
    backward, elastic_net_penalty, gradient_terms, l2_prediction_penalty, loss_outcome,
    loss_treatment, objective_terms, total_objective, Batch, ObjectiveBreakdown, Terms,
};
pub use train::{train, EpochRecord, Standardizer, TrainOutcome, TrainedModel, CHECKPOINT_VERSION};

/// Number of treatment classes.
pub const N_TREATMENTS: usize = 2;

/// Affine layer `y = x W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, gain: f64, stream: &mut RandomStream) -> Dense {
        let limit = (gain / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| (2.0 * stream.uniform() - 1.0) * limit)
            .collect();
        Dense {
            weight: Matrix::from_raw(fan_in, fan_out, w),
            bias: vec![0.0; fan_out],
        }
    }

    fn zeros_like(&self) -> Dense {
        Dense {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// All trainable parameters. The same layout doubles as the gradient and the
/// Adam moment buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// Diagonal selection weights, one per input column; `None` when the
    /// selection layer is ablated.
    pub selection: Option<Vec<f64>>,
    pub rep_layers: Vec<Dense>,
    pub treat_head: Vec<Dense>,
    pub out_head0: Vec<Dense>,
    pub out_head1: Vec<Dense>,
}

fn head(rep_dim: usize, config: &TrainConfig, out: usize, stream: &mut RandomStream) -> Vec<Dense> {
    let mut layers = Vec::with_capacity(config.pred_layers + 1);
    let mut width = rep_dim;
    for _ in 0..config.pred_layers {
        layers.push(Dense::init(width, config.pred_width, 6.0, stream));
        width = config.pred_width;
    }
    layers.push(Dense::init(width, out, 3.0, stream));
    layers
}

impl NetworkParams {
    /// Fresh parameters: selection weights at 1, affine layers uniform with
    /// fan-in scaling, biases at 0.
    pub fn init(
        input_dim: usize,
        config: &TrainConfig,
        stream: &mut RandomStream,
    ) -> NetworkParams {
        let mut rep_layers = Vec::with_capacity(config.layer_dims.len());
        let mut width = input_dim;
        for &w in &config.layer_dims {
            rep_layers.push(Dense::init(width, w, 6.0, stream));
            width = w;
        }
        let treat_head = head(width, config, N_TREATMENTS, stream);
        let out_head0 = head(width, config, 1, stream);
        let out_head1 = head(width, config, 1, stream);
        NetworkParams {
            selection: config.feature_selection.then(|| vec![1.0; input_dim]),
            rep_layers,
            treat_head,
            out_head0,
            out_head1,
        }
    }

    /// Parameter set with no layers; useful as a container in tests.
    pub fn empty() -> NetworkParams {
        NetworkParams {
            selection: None,
            rep_layers: Vec::new(),
            treat_head: Vec::new(),
            out_head0: Vec::new(),
            out_head1: Vec::new(),
        }
    }

    pub fn zeros_like(&self) -> NetworkParams {
        let z = |v: &Vec<Dense>| v.iter().map(Dense::zeros_like).collect();
        NetworkParams {
            selection: self.selection.as_ref().map(|d| vec![0.0; d.len()]),
            rep_layers: z(&self.rep_layers),
            treat_head: z(&self.treat_head),
            out_head0: z(&self.out_head0),
            out_head1: z(&self.out_head1),
        }
    }

    pub fn input_dim(&self) -> usize {
        match (&self.selection, self.rep_layers.first()) {
            (Some(d), _) => d.len(),
            (None, Some(l)) => l.input_dim(),
            (None, None) => 0,
        }
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_layers
            .last()
            .map_or(self.input_dim(), Dense::output_dim)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.rep_layers
            .iter()
            .chain(&self.treat_head)
            .chain(&self.out_head0)
            .chain(&self.out_head1)
    }

    /// Every parameter block in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(d) = &self.selection {
            out.push(d);
        }
        for l in self.layers() {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(d) = &mut self.selection {
            out.push(d);
        }
        let layers = self
            .rep_layers
            .iter_mut()
            .chain(self.treat_head.iter_mut())
            .chain(self.out_head0.iter_mut())
            .chain(self.out_head1.iter_mut());
        for l in layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flattened copy of every parameter, in [`NetworkParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}
