//! Adam optimizer with bias correction.

use super::mlp::{MlpGrads, MlpParams};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub(crate) m: Vec<(Tensor, Tensor)>,
    pub(crate) v: Vec<(Tensor, Tensor)>,
    pub(crate) step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros = |p: &MlpParams| -> Vec<(Tensor, Tensor)> {
            p.layers()
                .iter()
                .map(|l| {
                    (
                        Tensor::zeros(l.weight.shape().to_vec()),
                        Tensor::zeros(l.bias.shape().to_vec()),
                    )
                })
                .collect()
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update in place. Errors if the gradient is non-finite or the
/// state shapes do not match the parameters.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &MlpGrads,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(), NumericsError> {
    let n = params.layers().len();
    if grads.layers.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(NumericsError::OptimizerMismatch {
            context: format!(
                "{} layers, {} gradient entries, {} moment entries",
                n,
                grads.layers.len(),
                state.m.len()
            ),
        });
    }
    for (i, (layer, (gw, gb))) in params.layers().iter().zip(&grads.layers).enumerate() {
        if !gw.all_finite() {
            return Err(NumericsError::NonFiniteParamGradient {
                name: format!("layer {i} weight"),
            });
        }
        if !gb.all_finite() {
            return Err(NumericsError::NonFiniteParamGradient {
                name: format!("layer {i} bias"),
            });
        }
        if gw.shape() != layer.weight.shape() || gb.shape() != layer.bias.shape() {
            return Err(NumericsError::OptimizerMismatch {
                context: format!("layer {i} gradient shape mismatch"),
            });
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - hyper.beta1.powf(t);
    let bias2 = 1.0 - hyper.beta2.powf(t);

    for (layer, ((gw, gb), ((mw, mb), (vw, vb)))) in params.layers_mut().iter_mut().zip(
        grads
            .layers
            .iter()
            .zip(state.m.iter_mut().zip(state.v.iter_mut())),
    ) {
        update_inplace(
            layer.weight.data_mut(),
            gw.data(),
            mw.data_mut(),
            vw.data_mut(),
            lr,
            hyper,
            bias1,
            bias2,
        );
        update_inplace(
            layer.bias.data_mut(),
            gb.data(),
            mb.data_mut(),
            vb.data_mut(),
            lr,
            hyper,
            bias1,
            bias2,
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_inplace(
    theta: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    hyper: &AdamHyper,
    bias1: f64,
    bias2: f64,
) {
    for k in 0..theta.len() {
        m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
        v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
        let m_hat = m[k] / bias1;
        let v_hat = v[k] / bias2;
        theta[k] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, MlpGrads};
    use approx::assert_abs_diff_eq;

    fn scalar_net(x: f64) -> MlpParams {
        MlpParams::new(
            vec![crate::numerics::Layer {
                weight: Tensor::new(vec![1, 1], vec![x]).unwrap(),
                bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
            }],
            vec![Activation::Identity],
            vec![0.0],
        )
        .unwrap()
    }

    fn grad_of(w: f64, b: f64) -> MlpGrads {
        MlpGrads {
            layers: vec![(
                Tensor::new(vec![1, 1], vec![w]).unwrap(),
                Tensor::new(vec![1], vec![b]).unwrap(),
            )],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = scalar_net(0.37);
        let mut state = AdamState::new(&params);
        // Pre-load a moment so the decay path is exercised.
        state.m[0].0.data_mut()[0] = 0.5;
        state.v[0].0.data_mut()[0] = 0.25;
        adam_step(
            &mut params,
            &grad_of(0.0, 0.0),
            &mut state,
            3e-4,
            &AdamHyper::default(),
        )
        .unwrap();
        // First moment decays toward zero but the parameter only moves by the
        // decayed-moment step, which is nonzero here; with fresh zero moments
        // the parameter must not move at all.
        let mut fresh = scalar_net(0.37);
        let mut fresh_state = AdamState::new(&fresh);
        adam_step(
            &mut fresh,
            &grad_of(0.0, 0.0),
            &mut fresh_state,
            3e-4,
            &AdamHyper::default(),
        )
        .unwrap();
        assert_eq!(fresh.layers()[0].weight.data()[0], 0.37);
        assert_abs_diff_eq!(state.m[0].0.data()[0], 0.45, epsilon = 1e-15);
        assert_abs_diff_eq!(state.v[0].0.data()[0], 0.25 * 0.999, epsilon = 1e-15);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With zero moments, the bias-corrected first step is lr·sign(g) up
        // to the eps term.
        let mut params = scalar_net(1.0);
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &grad_of(0.002, 0.0),
            &mut state,
            3e-4,
            &AdamHyper::default(),
        )
        .unwrap();
        let delta = params.layers()[0].weight.data()[0] - 1.0;
        assert_abs_diff_eq!(delta, -3e-4, epsilon = 3e-9);
    }

    #[test]
    fn hundred_steps_on_a_quadratic_match_an_independent_recurrence() {
        // Oracle: the Adam recurrence written out with plain scalars.
        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 3e-4);
        let mut x_ref = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut traj_ref = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * x_ref;
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let m_hat = m / (1.0 - beta1.powi(t));
            let v_hat = v / (1.0 - beta2.powi(t));
            x_ref -= lr * m_hat / (v_hat.sqrt() + eps);
            traj_ref.push(x_ref);
        }

        let mut params = scalar_net(1.0);
        let mut state = AdamState::new(&params);
        let mut prev = 1.0_f64;
        for step in 0..100 {
            let x = params.layers()[0].weight.data()[0];
            adam_step(
                &mut params,
                &grad_of(2.0 * x, 0.0),
                &mut state,
                lr,
                &AdamHyper::default(),
            )
            .unwrap();
            let now = params.layers()[0].weight.data()[0];
            assert_abs_diff_eq!(now, traj_ref[step], epsilon = 1e-12);
            assert!(now.abs() < prev.abs(), "|x| must strictly decrease");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_parameter_name() {
        let mut params = scalar_net(0.0);
        let mut state = AdamState::new(&params);
        let err = adam_step(
            &mut params,
            &grad_of(f64::NAN, 0.0),
            &mut state,
            1e-3,
            &AdamHyper::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0 weight"), "got: {msg}");
    }
}
