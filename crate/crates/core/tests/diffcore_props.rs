//! Algebraic properties of the tape and the optimizer.

use ibp::diffcore::{clip_global_norm, global_norm, AdamConfig, AdamState, NodeId, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// A small two-layer network with two different scalar heads.
fn two_losses(tape: &mut Tape, rng: &mut ChaCha8Rng, rows: usize) -> (NodeId, NodeId, Vec<NodeId>) {
    let x = tape.constant(random(rng, &[rows, 3]));
    let w1 = tape.leaf(random(rng, &[3, 4]));
    let b1 = tape.leaf(random(rng, &[1, 4]));
    let w2 = tape.leaf(random(rng, &[4, 2]));
    let h = tape.matmul(x, w1).unwrap();
    let h = tape.add(h, b1).unwrap();
    let h = tape.tanh(h).unwrap();
    let y = tape.matmul(h, w2).unwrap();
    let sq = tape.square(y).unwrap();
    let l1 = tape.mean(sq).unwrap();
    let sm = tape.log_softmax(y).unwrap();
    let first = tape.slice(sm, 0, 1).unwrap();
    let l2 = tape.sum(first).unwrap();
    (l1, l2, vec![w1, b1, w2])
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), rows in 1usize..5, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let (l1, l2, params) = two_losses(&mut tape, &mut rng, rows);
        let s1 = tape.scale(l1, a).unwrap();
        let s2 = tape.scale(l2, b).unwrap();
        let combo = tape.add(s1, s2).unwrap();
        let g1 = tape.backward(l1).unwrap().collect(&params);
        let g2 = tape.backward(l2).unwrap().collect(&params);
        let gc = tape.backward(combo).unwrap().collect(&params);
        for ((x, y), z) in g1.iter().zip(&g2).zip(&gc) {
            for ((x, y), z) in x.data().iter().zip(y.data()).zip(z.data()) {
                let expect = a * x + b * y;
                prop_assert!((expect - z).abs() <= 1e-12 * (1.0 + expect.abs()), "{expect} vs {z}");
            }
        }
    }

    #[test]
    fn clipping_bounds_the_norm(
        values in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..8), 1..5),
        max_norm in 1e-6f64..1e3,
    ) {
        let mut grads: Vec<Tensor> = values.into_iter().map(Tensor::row).collect();
        let before = global_norm(&grads);
        let reported = clip_global_norm(&mut grads, max_norm);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&grads) <= max_norm * (1.0 + 1e-12));
    }

    #[test]
    fn replay_is_bit_exact(seed in any::<u64>(), rows in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let (_, _, params) = two_losses(&mut tape, &mut rng, rows);
        let both = tape.stack_rows(&[params[1], params[1]]).unwrap();
        let picked = tape.gather_rows(both, vec![Some(1), None, Some(0)]).unwrap();
        let e = tape.exp(picked).unwrap();
        tape.sigmoid(e).unwrap();
        prop_assert!(tape.replay_matches().unwrap());
    }

    #[test]
    fn adam_moments_track_parameters(seed in any::<u64>(), steps in 1u64..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = [random(&mut rng, &[2, 3]), random(&mut rng, &[1, 3])];
        let mut state = AdamState::new(params.iter());
        for i in 0..steps {
            let grads: Vec<Tensor> = params.iter().map(|p| random(&mut rng, p.shape())).collect();
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            state.update(&mut refs, &grads, &AdamConfig::default()).unwrap();
            prop_assert_eq!(state.step, i + 1);
            for ((p, m), v) in params.iter().zip(&state.first).zip(&state.second) {
                prop_assert_eq!(p.shape(), m.shape());
                prop_assert_eq!(p.shape(), v.shape());
            }
        }
    }
}

#[test]
fn forward_values_stay_finite_on_finite_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for rows in 1..6 {
        let mut tape = Tape::new();
        let (l1, l2, _) = two_losses(&mut tape, &mut rng, rows);
        assert!(tape.replay().unwrap().iter().all(Tensor::is_finite));
        assert!(tape.value(l1).is_finite() && tape.value(l2).is_finite());
    }
}
