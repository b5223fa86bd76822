//! Central finite-difference checks of tape gradients.

use super::{DiffError, NodeId, Tape, Tensor};

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Number of scalar input entries compared.
    pub entries: usize,
}

/// Denominator floor: below this magnitude errors are judged absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Compare reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`, for every entry of every input.
///
/// `f` receives one leaf per input and must return a scalar node. It is
/// rerun on a fresh tape for each perturbation.
pub fn gradient_check<E, F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, E>
where
    E: From<DiffError>,
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, E>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let grads = tape.backward(out)?.collect(&ids);

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut xs = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
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
