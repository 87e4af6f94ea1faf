use super::{Dense, NetworkParams, N_TREATMENTS};
use crate::error::{FsrmError, Result};
use crate::numcore::{Matrix, RandomStream};

/// Forward-pass mode; dropout only applies while training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Eval,
}

impl Mode {
    fn dropout(self) -> f64 {
        match self {
            Mode::Train { dropout } => dropout,
            Mode::Eval => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub representation: Matrix,
    pub treat_logits: Matrix,
    /// Softmax probability of the treated class.
    pub p_treated: Vec<f64>,
    pub y0_hat: Vec<f64>,
    pub y1_hat: Vec<f64>,
    /// Prediction of the head matching each unit's observed treatment.
    pub y_hat: Vec<f64>,
}

/// Activations kept for the backward pass of one affine layer.
pub(crate) struct DenseTape {
    pub input: Matrix,
    pub pre: Matrix,
    /// ReLU followed by inverted-dropout scale factors; `None` for a linear layer.
    pub relu_mask: Option<Option<Vec<f64>>>,
}

pub(crate) struct Tape {
    pub x: Matrix,
    pub rep: Vec<DenseTape>,
    pub treat: Vec<DenseTape>,
    pub out0: Vec<DenseTape>,
    pub out1: Vec<DenseTape>,
}

fn affine(input: &Matrix, layer: &Dense) -> Matrix {
    let mut out = input.matmul(&layer.weight);
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(&layer.bias) {
            *o += b;
        }
    }
    out
}

/// Runs a stack of affine layers. Every layer is ReLU + dropout except the
/// last one when `linear_output` is set.
fn run_stack(
    layers: &[Dense],
    input: Matrix,
    linear_output: bool,
    dropout: f64,
    stream: &mut RandomStream,
) -> (Matrix, Vec<DenseTape>) {
    let mut tapes = Vec::with_capacity(layers.len());
    let mut h = input;
    for (k, layer) in layers.iter().enumerate() {
        let pre = affine(&h, layer);
        let linear = linear_output && k + 1 == layers.len();
        let (out, relu_mask) = if linear {
            (pre.clone(), None)
        } else {
            let mut out = pre.clone();
            let mask = (dropout > 0.0).then(|| {
                let keep = 1.0 - dropout;
                (0..out.as_slice().len())
                    .map(|_| {
                        if stream.uniform() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect::<Vec<f64>>()
            });
            match &mask {
                Some(m) => out
                    .as_mut_slice()
                    .iter_mut()
                    .zip(m)
                    .for_each(|(v, s)| *v = v.max(0.0) * s),
                None => out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
            }
            (out, Some(mask))
        };
        tapes.push(DenseTape {
            input: h,
            pre,
            relu_mask,
        });
        h = out;
    }
    (h, tapes)
}

pub(crate) fn forward_with_tape(
    params: &NetworkParams,
    x: &Matrix,
    t: &[bool],
    mode: Mode,
    stream: &mut RandomStream,
) -> Result<(ForwardResult, Tape)> {
    if x.cols() != params.input_dim() {
        return Err(FsrmError::invalid(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    if t.len() != x.rows() {
        return Err(FsrmError::invalid(format!(
            "{} treatments for {} rows",
            t.len(),
            x.rows()
        )));
    }
    if params.treat_head.is_empty() || params.out_head0.is_empty() || params.out_head1.is_empty() {
        return Err(FsrmError::invalid("network is missing a prediction head"));
    }
    let dropout = mode.dropout();
    let mut selected = x.clone();
    if let Some(d) = &params.selection {
        for i in 0..selected.rows() {
            selected
                .row_mut(i)
                .iter_mut()
                .zip(d)
                .for_each(|(v, w)| *v *= w);
        }
    }
    let (rep, rep_tape) = run_stack(&params.rep_layers, selected, false, dropout, stream);
    let (logits, treat_tape) = run_stack(&params.treat_head, rep.clone(), true, dropout, stream);
    let (y0, out0_tape) = run_stack(&params.out_head0, rep.clone(), true, dropout, stream);
    let (y1, out1_tape) = run_stack(&params.out_head1, rep.clone(), true, dropout, stream);

    let p_treated = (0..logits.rows())
        .map(|i| softmax(logits.row(i))[1].clamp(1e-12, 1.0 - 1e-12))
        .collect();
    let y0_hat = y0.into_vec();
    let y1_hat = y1.into_vec();
    let y_hat = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| if ti { y1_hat[i] } else { y0_hat[i] })
        .collect();
    let fr = ForwardResult {
        representation: rep,
        treat_logits: logits,
        p_treated,
        y0_hat,
        y1_hat,
        y_hat,
    };
    let tape = Tape {
        x: x.clone(),
        rep: rep_tape,
        treat: treat_tape,
        out0: out0_tape,
        out1: out1_tape,
    };
    Ok((fr, tape))
}

/// Forward pass. `t` routes each unit to the outcome head of its observed
/// treatment; `stream` supplies dropout masks in [`Mode::Train`].
pub fn forward(
    params: &NetworkParams,
    x: &Matrix,
    t: &[bool],
    mode: Mode,
    stream: &mut RandomStream,
) -> Result<ForwardResult> {
    forward_with_tape(params, x, t, mode, stream).map(|(fr, _)| fr)
}

pub(crate) fn softmax(logits: &[f64]) -> [f64; N_TREATMENTS] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; N_TREATMENTS];
    let mut z = 0.0;
    for (pk, l) in p.iter_mut().zip(logits) {
        *pk = (l - max).exp();
        z += *pk;
    }
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Backpropagates `grad_out` through a stack, accumulating into `grads`, and
/// returns the gradient with respect to the stack input.
pub(crate) fn backward_stack(
    layers: &[Dense],
    tapes: &[DenseTape],
    grad_out: Matrix,
    grads: &mut [Dense],
) -> Matrix {
    let mut g = grad_out;
    for k in (0..layers.len()).rev() {
        let tape = &tapes[k];
        if let Some(mask) = &tape.relu_mask {
            let pre = tape.pre.as_slice();
            let gs = g.as_mut_slice();
            match mask {
                Some(m) => {
                    for ((gv, &p), &s) in gs.iter_mut().zip(pre).zip(m) {
                        *gv = if p > 0.0 { *gv * s } else { 0.0 };
                    }
                }
                None => {
                    for (gv, &p) in gs.iter_mut().zip(pre) {
                        if p <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
            }
        }
        let dw = tape.input.t_matmul(&g);
        let grad = &mut grads[k];
        grad.weight
            .as_mut_slice()
            .iter_mut()
            .zip(dw.as_slice())
            .for_each(|(a, b)| *a += b);
        for i in 0..g.rows() {
            grad.bias
                .iter_mut()
                .zip(g.row(i))
                .for_each(|(a, b)| *a += b);
        }
        g = g.matmul_t(&layers[k].weight);
    }
    g
}
