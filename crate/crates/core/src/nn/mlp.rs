use serde::{Deserialize, Serialize};

use super::{bind_tensors, uniform_init, NnError, Parameters};
use crate::diffcore::{NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Affine layer `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn input_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Multi-layer perceptron; the last layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl rand::Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: uniform_init(rng, &[w[0], w[1]], w[0]),
                bias: uniform_init(rng, &[1, w[1]], w[0]),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().output_width()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_width()];
        s.extend(self.layers.iter().map(Dense::output_width));
        s
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let ids = bind_tensors(tape, self.tensors(), trainable);
        BoundMlp {
            layers: ids.chunks(2).map(|p| (p[0], p[1])).collect(),
            activation: self.activation,
            input_width: self.input_width(),
        }
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(NodeId, NodeId)>,
    activation: Activation,
    input_width: usize,
}

impl BoundMlp {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Forward pass over a `[batch, in]` input.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, NnError> {
        let got = tape.value(x).last_dim();
        if got != self.input_width {
            return Err(NnError::Width {
                what: "mlp input",
                expected: self.input_width,
                got,
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Relu => tape.relu(h)?,
                };
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_output_final_bias() {
        let mut mlp = Mlp::zeros(&[3, 4, 2], Activation::Tanh);
        mlp.layers[1].bias = Tensor::row(vec![0.5, -1.5]);
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape, true);
        for input in [vec![0.0, 0.0, 0.0], vec![3.0, -2.0, 9.0]] {
            let x = tape.constant(Tensor::row(input));
            let y = bound.forward(&mut tape, x).unwrap();
            assert_eq!(tape.value(y).data(), &[0.5, -1.5]);
        }
    }

    #[test]
    fn identity_linear_layer() {
        let mlp = Mlp {
            layers: vec![Dense {
                weight: Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]),
                bias: Tensor::zeros(&[1, 2]),
            }],
            activation: Activation::Relu,
        };
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape, false);
        let x = tape.constant(Tensor::row(vec![-4.0, 2.5]));
        let y = bound.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[-4.0, 2.5]);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 4, 2], Activation::Tanh, &mut rng);
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape, true);
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(bound.forward(&mut tape, x), Err(NnError::Width { .. })));
    }

    #[test]
    fn init_within_fan_in_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[16, 8, 1], Activation::Relu, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(mlp.layers[0].weight.data().iter().all(|v| v.abs() <= bound));
    }
}
