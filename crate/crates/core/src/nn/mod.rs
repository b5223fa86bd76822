//! Network blocks built on the tape: MLPs, a gated recurrent memory cell,
//! a relational dynamics model and categorical policy heads.

mod categorical;
mod lstm;
mod mlp;
mod relational;

pub use categorical::{categorical_head, Categorical};
pub use lstm::{BoundLstm, LstmCell, LstmState};
pub use mlp::{Activation, BoundMlp, Dense, Mlp};
pub use relational::{BoundRelational, ModelOutput, RelationalConfig, RelationalModel, BODY_FEATURES, SHIP_FEATURES};

use crate::diffcore::{DiffError, GradCheck, NodeId, Tape, Tensor, REL_FLOOR};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("{what}: expected width {expected}, got {got}")]
    Width {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("relational model configured for {expected} planets, state describes {got_width} values")]
    BodyCount { expected: usize, got_width: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Anything holding trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Put each tensor on the tape, as a differentiable leaf or as a constant.
pub(crate) fn bind_tensors<'a>(
    tape: &mut Tape,
    tensors: impl IntoIterator<Item = &'a Tensor>,
    trainable: bool,
) -> Vec<NodeId> {
    tensors
        .into_iter()
        .map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// Uniform initialisation in `±1/sqrt(fan_in)`.
pub(crate) fn uniform_init(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Finite-difference check of parameter gradients.
///
/// `f` binds `model` as trainable onto the tape it is given and returns the
/// scalar loss together with the parameter ids in [`Parameters::tensors`]
/// order. Every parameter entry is perturbed by `±h` on a fresh copy.
pub fn parameter_check<P, F>(model: &P, h: f64, f: F) -> Result<GradCheck, NnError>
where
    P: Parameters + Clone,
    F: Fn(&mut Tape, &P) -> Result<(NodeId, Vec<NodeId>), NnError>,
{
    let eval = |m: &P| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let (out, _) = f(&mut tape, m)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let (out, ids) = f(&mut tape, model)?;
    let grads = tape.backward(out)?.collect(&ids);
    let mut copy = model.clone();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.numel() {
            let orig = copy.tensors()[i].data()[j];
            copy.tensors_mut()[i].data_mut()[j] = orig + h;
            let plus = eval(&copy)?;
            copy.tensors_mut()[i].data_mut()[j] = orig - h;
            let minus = eval(&copy)?;
            copy.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = g.data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        entries,
    })
}
