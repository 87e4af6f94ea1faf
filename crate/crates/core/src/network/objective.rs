use serde::{Deserialize, Serialize};

use super::forward::{backward_stack, forward_with_tape, softmax, Tape};
use super::{ForwardResult, Mode, NetworkParams, TrainConfig};
use crate::balance::{sinkhorn_wasserstein, wasserstein_grad};
use crate::error::{FsrmError, Result};
use crate::numcore::{Matrix, RandomStream};

/// Floor applied to predicted probabilities before the log.
const PROB_FLOOR: f64 = 1e-12;

/// A minibatch view.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub t: &'a [bool],
    pub y: &'a [f64],
}

/// Which objective terms to include.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub treatment: bool,
    pub outcome: bool,
    pub ipm: bool,
    pub elastic_net: bool,
    pub prediction_l2: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        treatment: true,
        outcome: true,
        ipm: true,
        elastic_net: true,
        prediction_l2: true,
    };

    pub const NONE: Terms = Terms {
        treatment: false,
        outcome: false,
        ipm: false,
        elastic_net: false,
        prediction_l2: false,
    };
}

/// Value of every objective term; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub treatment: f64,
    pub outcome: f64,
    pub ipm: f64,
    pub elastic_net: f64,
    pub prediction_l2: f64,
    pub total: f64,
    /// Unweighted factual-outcome MSE, reported alongside the weighted term.
    pub outcome_mse: f64,
    /// Set when the batch lacked a treatment group and the IPM term was dropped.
    pub ipm_skipped: bool,
}

impl ObjectiveBreakdown {
    fn finish(mut self) -> Self {
        self.total =
            self.treatment + self.outcome + self.ipm + self.elastic_net + self.prediction_l2;
        self
    }
}

/// Mean cross-entropy of the treatment head against the observed treatment.
pub fn loss_treatment(fr: &ForwardResult, t: &[bool]) -> f64 {
    let n = t.len();
    let mut total = 0.0;
    for (i, &ti) in t.iter().enumerate() {
        let p = softmax(fr.treat_logits.row(i));
        total -= p[ti as usize].max(PROB_FLOOR).ln();
    }
    total / n as f64
}

/// `delta · mean((y_hat - y)^2)` over the factual outcomes.
pub fn loss_outcome(fr: &ForwardResult, y: &[f64], delta: f64) -> f64 {
    delta * mse(&fr.y_hat, y)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|w| w * w).sum()
}

fn abs_norm(v: &[f64]) -> f64 {
    v.iter().map(|w| w.abs()).sum()
}

/// Elastic net over the selection weights and representation-layer weights.
pub fn elastic_net_penalty(params: &NetworkParams, lambda_l2: f64, alpha_l1: f64) -> f64 {
    let mut l2 = 0.0;
    let mut l1 = 0.0;
    if let Some(d) = &params.selection {
        l2 += sq_norm(d);
        l1 += abs_norm(d);
    }
    for l in &params.rep_layers {
        l2 += sq_norm(l.weight.as_slice());
        l1 += abs_norm(l.weight.as_slice());
    }
    lambda_l2 * l2 + alpha_l1 * l1
}

/// Squared L2 norm of all prediction-head weights, scaled by `beta`.
pub fn l2_prediction_penalty(params: &NetworkParams, beta: f64) -> f64 {
    let heads = params
        .treat_head
        .iter()
        .chain(&params.out_head0)
        .chain(&params.out_head1);
    beta * heads.map(|l| sq_norm(l.weight.as_slice())).sum::<f64>()
}

fn check_batch(batch: &Batch<'_>) -> Result<()> {
    let n = batch.x.rows();
    if n == 0 {
        return Err(FsrmError::invalid("empty batch"));
    }
    if batch.t.len() != n || batch.y.len() != n {
        return Err(FsrmError::invalid("batch arrays disagree in length"));
    }
    Ok(())
}

struct IpmPart {
    value: f64,
    skipped: bool,
    grad_rep: Option<Matrix>,
}

fn ipm_term(rep: &Matrix, t: &[bool], config: &TrainConfig, want_grad: bool) -> Result<IpmPart> {
    if config.gamma == 0.0 {
        return Ok(IpmPart {
            value: 0.0,
            skipped: false,
            grad_rep: None,
        });
    }
    let treated: Vec<usize> = (0..t.len()).filter(|&i| t[i]).collect();
    let control: Vec<usize> = (0..t.len()).filter(|&i| !t[i]).collect();
    if treated.is_empty() || control.is_empty() {
        return Ok(IpmPart {
            value: 0.0,
            skipped: true,
            grad_rep: None,
        });
    }
    let rt = rep.select_rows(&treated);
    let rc = rep.select_rows(&control);
    let plan = sinkhorn_wasserstein(&rt, &rc, config.sinkhorn_eps, config.sinkhorn_iters)?;
    let grad_rep = want_grad.then(|| {
        let g = wasserstein_grad(&plan, &rt, &rc, config.ipm_gradient);
        let mut out = Matrix::zeros(rep.rows(), rep.cols());
        for (k, &i) in treated.iter().enumerate() {
            out.row_mut(i)
                .iter_mut()
                .zip(g.treated.row(k))
                .for_each(|(o, v)| *o = config.gamma * v);
        }
        for (k, &i) in control.iter().enumerate() {
            out.row_mut(i)
                .iter_mut()
                .zip(g.control.row(k))
                .for_each(|(o, v)| *o = config.gamma * v);
        }
        out
    });
    Ok(IpmPart {
        value: config.gamma * plan.cost,
        skipped: false,
        grad_rep,
    })
}

fn evaluate(
    params: &NetworkParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    mode: Mode,
    terms: Terms,
    stream: &mut RandomStream,
    want_grad: bool,
) -> Result<(ObjectiveBreakdown, Option<NetworkParams>)> {
    check_batch(batch)?;
    let (fr, tape) = forward_with_tape(params, batch.x, batch.t, mode, stream)?;
    let mut br = ObjectiveBreakdown {
        outcome_mse: mse(&fr.y_hat, batch.y),
        ..Default::default()
    };
    if terms.treatment {
        br.treatment = loss_treatment(&fr, batch.t);
    }
    if terms.outcome {
        br.outcome = config.delta * br.outcome_mse;
    }
    let ipm = if terms.ipm {
        ipm_term(&fr.representation, batch.t, config, want_grad)?
    } else {
        IpmPart {
            value: 0.0,
            skipped: false,
            grad_rep: None,
        }
    };
    br.ipm = ipm.value;
    br.ipm_skipped = ipm.skipped;
    if terms.elastic_net {
        br.elastic_net = elastic_net_penalty(params, config.lambda_l2, config.alpha_l1);
    }
    if terms.prediction_l2 {
        br.prediction_l2 = l2_prediction_penalty(params, config.beta);
    }
    let br = br.finish();
    if !want_grad {
        return Ok((br, None));
    }
    let grads = backprop(params, batch, config, terms, &fr, &tape, ipm.grad_rep);
    Ok((br, Some(grads)))
}

fn backprop(
    params: &NetworkParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    terms: Terms,
    fr: &ForwardResult,
    tape: &Tape,
    ipm_grad: Option<Matrix>,
) -> NetworkParams {
    let n = batch.t.len();
    let nf = n as f64;
    let mut grads = params.zeros_like();
    let mut g_rep = ipm_grad.unwrap_or_else(|| Matrix::zeros(n, fr.representation.cols()));

    if terms.treatment {
        let mut g_logits = Matrix::zeros(n, fr.treat_logits.cols());
        for (i, &ti) in batch.t.iter().enumerate() {
            let p = softmax(fr.treat_logits.row(i));
            // the floor is flat, so clamped units carry no gradient
            if p[ti as usize] < PROB_FLOOR {
                continue;
            }
            for (k, g) in g_logits.row_mut(i).iter_mut().enumerate() {
                let target = if k == ti as usize { 1.0 } else { 0.0 };
                *g = (p[k] - target) / nf;
            }
        }
        let g = backward_stack(
            &params.treat_head,
            &tape.treat,
            g_logits,
            &mut grads.treat_head,
        );
        add_into(&mut g_rep, &g);
    }
    if terms.outcome && config.delta != 0.0 {
        let mut g0 = Matrix::zeros(n, 1);
        let mut g1 = Matrix::zeros(n, 1);
        for i in 0..n {
            let g = 2.0 * config.delta * (fr.y_hat[i] - batch.y[i]) / nf;
            if batch.t[i] {
                g1.set(i, 0, g);
            } else {
                g0.set(i, 0, g);
            }
        }
        let g = backward_stack(&params.out_head0, &tape.out0, g0, &mut grads.out_head0);
        add_into(&mut g_rep, &g);
        let g = backward_stack(&params.out_head1, &tape.out1, g1, &mut grads.out_head1);
        add_into(&mut g_rep, &g);
    }

    let g_sel = backward_stack(&params.rep_layers, &tape.rep, g_rep, &mut grads.rep_layers);
    if let (Some(gd), Some(_)) = (&mut grads.selection, &params.selection) {
        for i in 0..n {
            for ((acc, gs), xv) in gd.iter_mut().zip(g_sel.row(i)).zip(tape.x.row(i)) {
                *acc += gs * xv;
            }
        }
    }

    if terms.elastic_net {
        let (lam, alpha) = (config.lambda_l2, config.alpha_l1);
        let penalize = |g: &mut [f64], w: &[f64]| {
            for (gv, &wv) in g.iter_mut().zip(w) {
                *gv += 2.0 * lam * wv + alpha * sign(wv);
            }
        };
        if let (Some(gd), Some(d)) = (&mut grads.selection, &params.selection) {
            penalize(gd, d);
        }
        for (gl, l) in grads.rep_layers.iter_mut().zip(&params.rep_layers) {
            penalize(gl.weight.as_mut_slice(), l.weight.as_slice());
        }
    }
    if terms.prediction_l2 {
        let beta = config.beta;
        let param_heads = params
            .treat_head
            .iter()
            .chain(&params.out_head0)
            .chain(&params.out_head1);
        let grad_heads = grads
            .treat_head
            .iter_mut()
            .chain(grads.out_head0.iter_mut())
            .chain(grads.out_head1.iter_mut());
        for (gl, l) in grad_heads.zip(param_heads) {
            for (gv, wv) in gl.weight.as_mut_slice().iter_mut().zip(l.weight.as_slice()) {
                *gv += 2.0 * beta * wv;
            }
        }
    }
    grads
}

/// Subgradient of |w|, taken as 0 at 0.
fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(acc: &mut Matrix, g: &Matrix) {
    acc.as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .for_each(|(a, b)| *a += b);
}

/// Value of the selected objective terms.
pub fn objective_terms(
    params: &NetworkParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    mode: Mode,
    terms: Terms,
    stream: &mut RandomStream,
) -> Result<ObjectiveBreakdown> {
    evaluate(params, batch, config, mode, terms, stream, false).map(|(br, _)| br)
}

/// Value and analytic gradient of the selected objective terms. Dropout masks
/// are drawn once and shared by the forward and backward pass.
pub fn gradient_terms(
    params: &NetworkParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    mode: Mode,
    terms: Terms,
    stream: &mut RandomStream,
) -> Result<(NetworkParams, ObjectiveBreakdown)> {
    let (br, grads) = evaluate(params, batch, config, mode, terms, stream, true)?;
    Ok((grads.expect("gradient requested"), br))
}

/// Full objective: treatment cross-entropy + weighted outcome MSE + weighted
/// Wasserstein imbalance + elastic net + head L2.
pub fn total_objective(
    params: &NetworkParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    mode: Mode,
    stream: &mut RandomStream,
) -> Result<ObjectiveBreakdown> {
    objective_terms(params, batch, config, mode, Terms::ALL, stream)
}

/// Gradient of [`total_objective`] in training mode.
pub fn backward(
    params: &NetworkParams,
    batch: &Batch<'_>,
    config: &TrainConfig,
    stream: &mut RandomStream,
) -> Result<(NetworkParams, ObjectiveBreakdown)> {
    let mode = Mode::Train {
        dropout: config.dropout_rate,
    };
    gradient_terms(params, batch, config, mode, Terms::ALL, stream)
}
