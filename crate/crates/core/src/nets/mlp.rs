use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{add_row_in_place, matmul_into, Activation, Mode, Tape, Tensor, Var};

use super::NetError;

/// Fully connected layer `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Feed-forward stack: hidden layers use `hidden` activation (and dropout
/// when `dropout > 0` in training mode), the last layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub name: String,
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub dropout: f64,
}

/// Parameter handles of an [`Mlp`] recorded on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub vars: Vec<(Var, Var)>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        hidden_sizes: &[usize],
        output: usize,
        hidden: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let mut sizes = Vec::with_capacity(hidden_sizes.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden_sizes);
        sizes.push(output);
        let layers = sizes.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self {
            name: name.to_string(),
            layers,
            hidden,
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::fan_out).unwrap_or(0)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Zeroes every weight and bias of the final layer.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
        }
    }

    /// Records the parameters as leaves; `trainable` controls whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                let (mut w, mut b) = (l.weight.clone(), l.bias.clone());
                w.set_requires_grad(trainable);
                b.set_requires_grad(trainable);
                (tape.leaf(w), tape.leaf(b))
            })
            .collect();
        BoundMlp { vars }
    }

    fn layer_name(&self, i: usize) -> String {
        format!("{}.dense{}", self.name, i)
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, NetError> {
        let mut h = input;
        let last = bound.vars.len() - 1;
        for (i, &(w, b)) in bound.vars.iter().enumerate() {
            let shape_err = |source| NetError::Layer {
                layer: self.layer_name(i),
                source,
            };
            h = tape.matmul(h, w).map_err(shape_err)?;
            h = tape.add_row(h, b).map_err(shape_err)?;
            if i < last {
                h = match self.hidden {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                    Activation::Identity => h,
                };
                if self.dropout > 0.0 {
                    h = tape.dropout(h, self.dropout, mode, rng).map_err(shape_err)?;
                }
            }
        }
        Ok(h)
    }

    /// Inference-mode forward pass on a flat `rows x input_dim` buffer.
    ///
    /// Uses the same kernels as the taped path, so outputs are bitwise equal
    /// to an eval-mode [`Mlp::forward`].
    pub fn forward_eval(&self, input: &[f64], rows: usize) -> Result<Vec<f64>, NetError> {
        if rows == 0 || input.len() != rows * self.input_dim() {
            return Err(NetError::InputLength {
                net: self.name.clone(),
                expected: self.input_dim(),
                got: if rows == 0 { 0 } else { input.len() / rows },
            });
        }
        let last = self.layers.len() - 1;
        let mut h = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, n) = (layer.fan_in(), layer.fan_out());
            let mut out = vec![0.0; rows * n];
            matmul_into(&h, rows, k, layer.weight.data(), n, &mut out);
            add_row_in_place(&mut out, layer.bias.data());
            if i < last {
                self.hidden.apply_in_place(&mut out);
            }
            h = out;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixed_two_layer() -> Mlp {
        // 4 -> 3 (tanh) -> 2
        let l1 = Dense {
            weight: Tensor::matrix(
                4,
                3,
                vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.2, 0.2, -0.3, 0.1, 0.4],
            )
            .unwrap(),
            bias: Tensor::new(vec![3], vec![0.05, -0.05, 0.0]).unwrap(),
        };
        let l2 = Dense {
            weight: Tensor::matrix(3, 2, vec![1.0, -1.0, 0.5, 0.25, -0.5, 2.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.1, 0.2]).unwrap(),
        };
        Mlp {
            name: "toy".into(),
            layers: vec![l1, l2],
            hidden: Activation::Tanh,
            dropout: 0.0,
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new("z", 4, &[5], 3, Activation::Tanh, 0.0, &mut rng);
        net.params_mut().for_each(|p| p.data_mut().fill(0.0));
        assert_eq!(net.forward_eval(&[1.0, -2.0, 3.0, 0.5], 1).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn chained_layers_match_hand_arithmetic() {
        let net = fixed_two_layer();
        let x = [1.0, 2.0, -1.0, 0.5];
        // hidden pre-activation, computed by hand
        let h_pre = [
            0.1 * 1.0 + 0.0 * 2.0 + 0.2 * -1.0 + -0.3 * 0.5 + 0.05,
            -0.2 * 1.0 + 0.5 * 2.0 + 0.2 * -1.0 + 0.1 * 0.5 - 0.05,
            0.3 * 1.0 + -0.1 * 2.0 + 0.2 * -1.0 + 0.4 * 0.5 + 0.0,
        ];
        let h: Vec<f64> = h_pre.iter().map(|v: &f64| v.tanh()).collect();
        let y0 = h[0] * 1.0 + h[1] * 0.5 + h[2] * -0.5 + 0.1;
        let y1 = h[0] * -1.0 + h[1] * 0.25 + h[2] * 2.0 + 0.2;
        let out = net.forward_eval(&x, 1).unwrap();
        assert!((out[0] - y0).abs() < 1e-12 && (out[1] - y1).abs() < 1e-12);
    }

    #[test]
    fn taped_and_eval_paths_are_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new("n", 6, &[7, 5], 3, Activation::Tanh, 0.1, &mut rng);
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let eval = net.forward_eval(&x, 2).unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let input = tape.constant(Tensor::matrix(2, 6, x).unwrap());
        let y = net.forward(&mut tape, &bound, input, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), eval.as_slice());
    }

    #[test]
    fn input_length_mismatch_names_the_net() {
        let net = fixed_two_layer();
        let err = net.forward_eval(&[1.0, 2.0], 1).unwrap_err();
        assert!(err.to_string().contains("toy"));
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let bad = tape.constant(Tensor::zeros(vec![1, 5]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = net.forward(&mut tape, &bound, bad, Mode::Eval, &mut rng).unwrap_err();
        assert!(err.to_string().contains("toy.dense0"), "{err}");
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Dense::init(30, 10, &mut rng);
        let limit = (6.0f64 / 40.0).sqrt();
        assert!(d.weight.data().iter().all(|w| w.abs() <= limit));
        assert!(d.bias.data().iter().all(|&b| b == 0.0));
    }
}
