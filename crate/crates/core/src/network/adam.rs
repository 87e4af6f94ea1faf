use super::{NetworkParams, TrainConfig};

/// First and second moment estimates for Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: NetworkParams,
    v: NetworkParams,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut AdamState,
    config: &TrainConfig,
) {
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let lr = config.learning_rate;
    let eps = config.adam_eps;

    let p = params.tensors_mut();
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    assert_eq!(
        p.len(),
        g.len(),
        "gradient layout does not match parameters"
    );
    for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> NetworkParams {
        let mut p = NetworkParams::empty();
        p.selection = Some(vec![w]);
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.7);
        let g = scalar(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &TrainConfig::default());
        assert_eq!(p.selection.unwrap()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar(1.0), &mut st, &cfg);
        // m_hat = v_hat = 1 after bias correction
        let expected = 1.0 - 0.1 / (1.0 + cfg.adam_eps);
        assert_eq!(p.selection.as_ref().unwrap()[0], expected);
        assert!((p.selection.unwrap()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = scalar(0.3);
            let mut st = AdamState::new(&p);
            for k in 0..10 {
                adam_step(
                    &mut p,
                    &scalar((k as f64).sin()),
                    &mut st,
                    &TrainConfig::default(),
                );
            }
            p.selection.unwrap()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
