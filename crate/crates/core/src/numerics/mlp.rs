//! Multi-layer perceptron parameters and forward passes.
//!
//! Weights are `[out × in]`, biases `[out]`. The pure forward pass and the
//! tape forward pass share the same kernels, so a network evaluated both
//! ways yields bit-identical outputs. Dropout is inverted (surviving units
//! scaled by 1/(1−p)) and only active when a seed is supplied.

use super::tape::{linear_forward, NodeId, Tape};
use super::tensor::Tensor;
use super::{Gradients, NumericsError};
use crate::seeding;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    activations: Vec<Activation>,
    dropout: Vec<f64>,
}

impl MlpParams {
    pub fn new(
        layers: Vec<Layer>,
        activations: Vec<Activation>,
        dropout: Vec<f64>,
    ) -> Result<Self, NumericsError> {
        if layers.is_empty() || activations.len() != layers.len() || dropout.len() != layers.len()
        {
            return Err(NumericsError::BadArchitecture {
                context: format!(
                    "{} layers, {} activations, {} dropout rates",
                    layers.len(),
                    activations.len(),
                    dropout.len()
                ),
            });
        }
        for (i, layer) in layers.iter().enumerate() {
            if !layer.weight.is_matrix()
                || layer.bias.shape().len() != 1
                || layer.bias.numel() != layer.weight.rows()
            {
                return Err(NumericsError::BadArchitecture {
                    context: format!(
                        "layer {i}: weight {:?}, bias {:?}",
                        layer.weight.shape(),
                        layer.bias.shape()
                    ),
                });
            }
            if i > 0 && layer.weight.cols() != layers[i - 1].weight.rows() {
                return Err(NumericsError::BadArchitecture {
                    context: format!(
                        "layer {i} input {} does not match layer {} output {}",
                        layer.weight.cols(),
                        i - 1,
                        layers[i - 1].weight.rows()
                    ),
                });
            }
        }
        for &rate in &dropout {
            if !(0.0..1.0).contains(&rate) {
                return Err(NumericsError::BadDropoutRate { rate });
            }
        }
        Ok(Self {
            layers,
            activations,
            dropout,
        })
    }

    /// Uniform init with bound 1/√fan_in for each layer, `hidden` activation
    /// between layers and a linear output layer.
    pub fn init(dims: &[usize], hidden: Activation, seed: u64) -> Result<Self, NumericsError> {
        if dims.len() < 2 {
            return Err(NumericsError::BadArchitecture {
                context: format!("need at least input and output dims, got {dims:?}"),
            });
        }
        let mut layers = Vec::new();
        let mut activations = Vec::new();
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = seeding::stream(&[seed, 0x6d6c70, i as u64]);
            let wdata: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bdata: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(Layer {
                weight: Tensor::new(vec![fan_out, fan_in], wdata)?,
                bias: Tensor::new(vec![fan_out], bdata)?,
            });
            activations.push(if i + 2 == dims.len() {
                Activation::Identity
            } else {
                hidden
            });
        }
        let n = layers.len();
        Self::new(layers, activations, vec![0.0; n])
    }

    pub fn with_dropout(mut self, hidden_rate: f64) -> Result<Self, NumericsError> {
        if !(0.0..1.0).contains(&hidden_rate) {
            return Err(NumericsError::BadDropoutRate { rate: hidden_rate });
        }
        let n = self.dropout.len();
        for (i, r) in self.dropout.iter_mut().enumerate() {
            // The output layer keeps rate 0.
            *r = if i + 1 == n { 0.0 } else { hidden_rate };
        }
        Ok(self)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn dropout(&self) -> &[f64] {
        &self.dropout
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Flattens all parameters into one vector (layer order, weight then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Rebuilds parameters from a flat vector produced by `flatten`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self, NumericsError> {
        if flat.len() != self.param_count() {
            return Err(NumericsError::BadArchitecture {
                context: format!(
                    "flat vector length {} does not match parameter count {}",
                    flat.len(),
                    self.param_count()
                ),
            });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            let wn = l.weight.numel();
            let bn = l.bias.numel();
            layers.push(Layer {
                weight: Tensor::new(l.weight.shape().to_vec(), flat[at..at + wn].to_vec())?,
                bias: Tensor::new(l.bias.shape().to_vec(), flat[at + wn..at + wn + bn].to_vec())?,
            });
            at += wn + bn;
        }
        Self::new(
            layers,
            self.activations.clone(),
            self.dropout.clone(),
        )
    }
}

fn dropout_mask(shape: &[usize], rate: f64, seed: u64, layer: usize) -> Tensor {
    let mut rng = seeding::stream(&[seed, 0x64726f70, layer as u64]);
    let keep = 1.0 - rate;
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| {
            if rng.random_range(0.0..1.0) < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized above")
}

/// Pure forward pass over a batch `[n × in_dim]`.
///
/// `dropout_seed` enables the dropout masks (training mode); `None` runs the
/// network deterministically with all units active.
pub fn forward(
    params: &MlpParams,
    input: &Tensor,
    dropout_seed: Option<u64>,
) -> Result<Tensor, NumericsError> {
    if !input.is_matrix() || input.cols() != params.in_dim() {
        return Err(NumericsError::ShapeMismatch {
            op: "mlp_forward",
            context: format!(
                "input {:?}, expected [n × {}]",
                input.shape(),
                params.in_dim()
            ),
        });
    }
    let mut h = input.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        h = linear_forward(&h, &layer.weight, &layer.bias);
        apply_activation(&mut h, params.activations[i]);
        let rate = params.dropout[i];
        if rate > 0.0 {
            if let Some(seed) = dropout_seed {
                let mask = dropout_mask(h.shape(), rate, seed, i);
                for (v, m) in h.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
            }
        }
    }
    if !h.all_finite() {
        return Err(NumericsError::NonFiniteValue {
            op: "mlp_forward",
            node: 0,
        });
    }
    Ok(h)
}

fn apply_activation(t: &mut Tensor, act: Activation) {
    match act {
        Activation::Relu => {
            for v in t.data_mut() {
                *v = v.max(0.0);
            }
        }
        Activation::Tanh => {
            for v in t.data_mut() {
                *v = v.tanh();
            }
        }
        Activation::Identity => {}
    }
}

/// Tape node ids of one network's parameters, in layer order.
pub struct MlpBinding {
    pub layer_ids: Vec<(NodeId, NodeId)>,
}

/// Gradients congruent with `MlpParams` (weight, bias per layer).
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl MlpGrads {
    /// Flat view in the same order as `MlpParams::flatten`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (gw, gb) in &self.layers {
            out.extend_from_slice(gw.data());
            out.extend_from_slice(gb.data());
        }
        out
    }
}

impl MlpBinding {
    /// Collects this network's gradients, substituting zeros for parameters
    /// the loss did not touch.
    pub fn extract(&self, grads: &Gradients, params: &MlpParams) -> MlpGrads {
        let layers = self
            .layer_ids
            .iter()
            .zip(params.layers())
            .map(|(&(wid, bid), layer)| {
                let gw = grads
                    .get(wid)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(layer.weight.shape().to_vec()));
                let gb = grads
                    .get(bid)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(layer.bias.shape().to_vec()));
                (gw, gb)
            })
            .collect();
        MlpGrads { layers }
    }
}

/// Records the network's forward pass on the tape, registering every weight
/// and bias as a parameter leaf.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &MlpParams,
    input: NodeId,
    dropout_seed: Option<u64>,
) -> Result<(NodeId, MlpBinding), NumericsError> {
    let mut h = input;
    let mut layer_ids = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let w = tape.param(&layer.weight)?;
        let b = tape.param(&layer.bias)?;
        layer_ids.push((w, b));
        h = tape.linear(h, w, b)?;
        h = match params.activations[i] {
            Activation::Relu => tape.relu(h)?,
            Activation::Tanh => tape.tanh(h)?,
            Activation::Identity => h,
        };
        let rate = params.dropout[i];
        if rate > 0.0 {
            if let Some(seed) = dropout_seed {
                let mask = dropout_mask(tape.value(h).shape(), rate, seed, i);
                h = tape.mul_const(h, &mask)?;
            }
        }
    }
    Ok((h, MlpBinding { layer_ids }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fixed_two_layer() -> MlpParams {
        // 2 → 3 relu → 1, weights chosen by simple closed-form patterns.
        let w0 = Tensor::new(
            vec![3, 2],
            vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6],
        )
        .unwrap();
        let b0 = Tensor::new(vec![3], vec![0.05, -0.1, 0.2]).unwrap();
        let w1 = Tensor::new(vec![1, 3], vec![1.0, -1.5, 2.0]).unwrap();
        let b1 = Tensor::new(vec![1], vec![-0.25]).unwrap();
        MlpParams::new(
            vec![
                Layer {
                    weight: w0,
                    bias: b0,
                },
                Layer {
                    weight: w1,
                    bias: b1,
                },
            ],
            vec![Activation::Relu, Activation::Identity],
            vec![0.0, 0.0],
        )
        .unwrap()
    }

    /// Oracle: the same two-layer net evaluated with plain nested loops,
    /// written independently of the Tensor kernels.
    fn oracle_forward(x: &[f64; 2]) -> f64 {
        let w0 = [[0.1, -0.2], [0.3, 0.4], [-0.5, 0.6]];
        let b0 = [0.05, -0.1, 0.2];
        let w1 = [1.0, -1.5, 2.0];
        let b1 = -0.25;
        let mut h = [0.0; 3];
        for j in 0..3 {
            let mut acc = b0[j];
            for k in 0..2 {
                acc += w0[j][k] * x[k];
            }
            h[j] = acc.max(0.0);
        }
        let mut out = b1;
        for j in 0..3 {
            out += w1[j] * h[j];
        }
        out
    }

    #[test]
    fn forward_matches_hand_rolled_two_layer_oracle() {
        let params = fixed_two_layer();
        let inputs = [[0.7, -1.3], [0.0, 0.0], [2.5, 1.1], [-0.4, 0.9]];
        for x in inputs {
            let t = Tensor::new(vec![1, 2], x.to_vec()).unwrap();
            let y = forward(&params, &t, None).unwrap();
            assert_abs_diff_eq!(y.data()[0], oracle_forward(&x), epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_is_pure_and_bit_stable() {
        let params = fixed_two_layer();
        let x = Tensor::new(vec![2, 2], vec![0.3, 0.4, -0.1, 0.8]).unwrap();
        let a = forward(&params, &x, None).unwrap();
        let b = forward(&params, &x, None).unwrap();
        let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn tape_forward_matches_pure_forward_bitwise() {
        let params = fixed_two_layer();
        let x = Tensor::new(vec![3, 2], vec![0.3, 0.4, -0.1, 0.8, 1.2, -2.0]).unwrap();
        let pure = forward(&params, &x, None).unwrap();
        let mut tape = Tape::new();
        let input = tape.constant(x).unwrap();
        let (out, _) = forward_on_tape(&mut tape, &params, input, None).unwrap();
        let taped = tape.value(out);
        let bits_a: Vec<u64> = pure.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = taped.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let params = MlpParams::init(&[2, 4, 1], Activation::Tanh, 99).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.2, -0.4, 1.0, 0.5, -0.9, 0.1]).unwrap();

        let eval = |flat: &[f64]| -> (f64, Vec<f64>) {
            let p = params.unflatten(flat).unwrap();
            let mut tape = Tape::new();
            let input = tape.constant(x.clone()).unwrap();
            let (out, binding) = forward_on_tape(&mut tape, &p, input, None).unwrap();
            let loss = tape.mean_all(out).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g = binding.extract(&grads, &p);
            let mut flat_g = Vec::new();
            for (gw, gb) in &g.layers {
                flat_g.extend_from_slice(gw.data());
                flat_g.extend_from_slice(gb.data());
            }
            (tape.value(loss).as_scalar().unwrap(), flat_g)
        };

        let theta = params.flatten();
        let (_, analytic) = eval(&theta);
        for k in 0..theta.len() {
            let h = 1e-6;
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let fd = (eval(&up).0 - eval(&dn).0) / (2.0 * h);
            assert_abs_diff_eq!(analytic[k], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn dropout_scales_survivors_and_is_seed_deterministic() {
        let params = MlpParams::init(&[2, 64, 1], Activation::Relu, 7)
            .unwrap()
            .with_dropout(0.5)
            .unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.2]).unwrap();
        let a = forward(&params, &x, Some(11)).unwrap();
        let b = forward(&params, &x, Some(11)).unwrap();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        let c = forward(&params, &x, Some(12)).unwrap();
        assert_ne!(a.data()[0].to_bits(), c.data()[0].to_bits());
        // Eval mode ignores dropout entirely.
        let eval_a = forward(&params, &x, None).unwrap();
        let eval_b = forward(&params, &x, None).unwrap();
        assert_eq!(eval_a, eval_b);
    }

    #[test]
    fn init_rejects_degenerate_dims() {
        assert!(MlpParams::init(&[4], Activation::Relu, 0).is_err());
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let params = MlpParams::init(&[3, 5, 2], Activation::Relu, 42).unwrap();
        let flat = params.flatten();
        let back = params.unflatten(&flat).unwrap();
        assert_eq!(params, back);
    }
}
