use rand::Rng;

use super::NnError;
use crate::diffcore::{NodeId, Tape, Tensor};

/// Additive logit offset that removes a choice from a categorical head.
const MASKED: f64 = -1e30;

/// A sampled categorical choice with differentiable log-probability and
/// entropy nodes.
#[derive(Clone, Debug)]
pub struct Categorical {
    pub probs: Vec<f64>,
    pub index: usize,
    pub log_prob: NodeId,
    pub entropy: NodeId,
}

/// Sample from `softmax(logits)` restricted to `mask` (all choices when
/// `None`). `logits` is a `[1, K]` node.
pub fn categorical_head(
    tape: &mut Tape,
    logits: NodeId,
    mask: Option<&[bool]>,
    rng: &mut impl Rng,
) -> Result<Categorical, NnError> {
    let k = tape.value(logits).last_dim();
    let logits = match mask {
        Some(mask) => {
            if mask.len() != k {
                return Err(NnError::Width {
                    what: "categorical mask",
                    expected: k,
                    got: mask.len(),
                });
            }
            let offsets = mask.iter().map(|&ok| if ok { 0.0 } else { MASKED }).collect();
            let offsets = tape.constant(Tensor::row(offsets));
            tape.add(logits, offsets)?
        }
        None => logits,
    };
    let log_p = tape.log_softmax(logits)?;
    let probs: Vec<f64> = tape.value(log_p).data().iter().map(|v| v.exp()).collect();

    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut index = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            index = i;
            break;
        }
    }
    while probs[index] == 0.0 && index > 0 {
        index -= 1;
    }

    let picked = tape.slice(log_p, index, index + 1)?;
    let log_prob = tape.sum(picked)?;
    let p = tape.exp(log_p)?;
    let plogp = tape.mul(p, log_p)?;
    let neg_entropy = tape.sum(plogp)?;
    let entropy = tape.scale(neg_entropy, -1.0)?;
    Ok(Categorical {
        probs,
        index,
        log_prob,
        entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn uniform_logits_entropy_is_ln3() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::row(vec![0.0; 3]));
        let c = categorical_head(&mut tape, l, None, &mut rng()).unwrap();
        assert!((tape.value(c.entropy).item() - 3f64.ln()).abs() < 1e-12);
        let g = tape.backward(c.entropy).unwrap();
        assert!(g.wrt(l).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn saturated_logits_pick_first() {
        let mut r = rng();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::row(vec![1000.0, 0.0, 0.0]));
            let c = categorical_head(&mut tape, l, None, &mut r).unwrap();
            assert_eq!(c.index, 0);
        }
    }

    #[test]
    fn masked_choice_never_sampled() {
        let mut r = rng();
        for _ in 0..500 {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::row(vec![0.0, 0.0, 5.0]));
            let c = categorical_head(&mut tape, l, Some(&[true, true, false]), &mut r).unwrap();
            assert_ne!(c.index, 2);
            assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((tape.value(c.entropy).item() - 2f64.ln()).abs() < 1e-12);
            let g = tape.backward(c.log_prob).unwrap();
            assert!(g.wrt(l).is_finite());
        }
    }
}
