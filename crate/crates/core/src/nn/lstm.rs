use serde::{Deserialize, Serialize};

use super::{bind_tensors, uniform_init, NnError, Parameters};
use crate::diffcore::{NodeId, Tape, Tensor};

/// LSTM cell with fused gate weights.
///
/// `weight: [input + hidden, 4 * hidden]` and `bias: [1, 4 * hidden]`; the
/// four column blocks are the input, forget, output and candidate gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input: usize,
    pub hidden: usize,
}

/// Hidden and cell state of an [`LstmCell`], both `[batch, hidden]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl rand::Rng) -> Self {
        let fan_in = input + hidden;
        let weight = uniform_init(rng, &[fan_in, 4 * hidden], fan_in);
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            weight,
            bias,
            input,
            hidden,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input + hidden, 4 * hidden]),
            bias: Tensor::zeros(&[1, 4 * hidden]),
            input,
            hidden,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLstm {
        let ids = bind_tensors(tape, self.tensors(), trainable);
        BoundLstm {
            weight: ids[0],
            bias: ids[1],
            input: self.input,
            hidden: self.hidden,
        }
    }
}

impl Parameters for LstmCell {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct BoundLstm {
    weight: NodeId,
    bias: NodeId,
    input: usize,
    hidden: usize,
}

impl BoundLstm {
    pub fn ids(&self) -> Vec<NodeId> {
        vec![self.weight, self.bias]
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, self.hidden])),
            c: tape.constant(Tensor::zeros(&[batch, self.hidden])),
        }
    }

    /// One gated update. The output of the cell is the new `h`.
    pub fn step(&self, tape: &mut Tape, x: NodeId, state: LstmState) -> Result<LstmState, NnError> {
        let got = tape.value(x).last_dim();
        if got != self.input {
            return Err(NnError::Width {
                what: "recurrent cell input",
                expected: self.input,
                got,
            });
        }
        let got = tape.value(state.h).last_dim();
        if got != self.hidden || tape.value(state.c).last_dim() != self.hidden {
            return Err(NnError::Width {
                what: "recurrent cell state",
                expected: self.hidden,
                got,
            });
        }
        let n = self.hidden;
        let xh = tape.concat(&[x, state.h])?;
        let z = tape.matmul(xh, self.weight)?;
        let z = tape.add(z, self.bias)?;
        let zi = tape.slice(z, 0, n)?;
        let zf = tape.slice(z, n, 2 * n)?;
        let zo = tape.slice(z, 2 * n, 3 * n)?;
        let zg = tape.slice(z, 3 * n, 4 * n)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let o = tape.sigmoid(zo)?;
        let g = tape.tanh(zg)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(3, 4, &mut rng);
        let b = cell.bias.data();
        assert!(b[..4].iter().all(|&v| v == 0.0));
        assert!(b[4..8].iter().all(|&v| v == 1.0));
        assert!(b[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let cell = LstmCell::zeros(3, 4);
        let mut tape = Tape::new();
        let bound = cell.bind(&mut tape, true);
        let s = bound.zero_state(&mut tape, 1);
        let x = tape.constant(Tensor::row(vec![1.0, -2.0, 3.0]));
        let s2 = bound.step(&mut tape, x, s).unwrap();
        assert!(tape.value(s2.h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_steps() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cell = LstmCell::new(2, 5, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let bound = cell.bind(&mut tape, false);
            let mut s = bound.zero_state(&mut tape, 1);
            for k in 0..3 {
                let x = tape.constant(Tensor::row(vec![k as f64, 0.5]));
                s = bound.step(&mut tape, x, s).unwrap();
            }
            tape.value(s.h).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn input_width_checked() {
        let cell = LstmCell::zeros(3, 4);
        let mut tape = Tape::new();
        let bound = cell.bind(&mut tape, true);
        let s = bound.zero_state(&mut tape, 1);
        let x = tape.constant(Tensor::row(vec![1.0]));
        assert!(bound.step(&mut tape, x, s).is_err());
    }
}
