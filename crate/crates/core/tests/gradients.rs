//! Analytic gradients against central finite differences.

use ibp::diffcore::{gradient_check, DiffError, NodeId, Tape, Tensor};
use ibp::nn::{parameter_check, Activation, LstmCell, Mlp, NnError, RelationalConfig, RelationalModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduce any node to a scalar through a fixed random weighting, so every
/// output entry contributes a distinct coefficient.
fn weigh(t: &mut Tape, y: NodeId, seed: u64) -> Result<NodeId, DiffError> {
    let shape = t.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = t.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId, DiffError>) {
    let r = gradient_check::<DiffError, _>(inputs, H, |t, ids| {
        let y = f(t, ids)?;
        weigh(t, y, seed)
    })
    .unwrap();
    assert!(
        r.max_rel_error < TOL,
        "relative error {} over {} entries",
        r.max_rel_error,
        r.entries
    );
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
    Square,
    Sum,
    Mean,
    Scale,
    Softmax,
    LogSoftmax,
    Slice,
    Gather,
    Norm,
}

const UNARY: [Unary; 15] = [
    Unary::Tanh,
    Unary::Sigmoid,
    Unary::Relu,
    Unary::Exp,
    Unary::Log,
    Unary::Sqrt,
    Unary::Square,
    Unary::Sum,
    Unary::Mean,
    Unary::Scale,
    Unary::Softmax,
    Unary::LogSoftmax,
    Unary::Slice,
    Unary::Gather,
    Unary::Norm,
];

fn apply(op: Unary, t: &mut Tape, x: NodeId, rows: usize, cols: usize) -> Result<NodeId, DiffError> {
    match op {
        Unary::Tanh => t.tanh(x),
        Unary::Sigmoid => t.sigmoid(x),
        Unary::Relu => t.relu(x),
        Unary::Exp => t.exp(x),
        Unary::Log => t.log(x),
        Unary::Sqrt => t.sqrt(x),
        Unary::Square => t.square(x),
        Unary::Sum => t.sum(x),
        Unary::Mean => t.mean(x),
        Unary::Scale => t.scale(x, -2.5),
        Unary::Softmax => t.softmax(x),
        Unary::LogSoftmax => t.log_softmax(x),
        Unary::Slice => t.slice(x, cols / 2, cols),
        Unary::Gather => {
            let picks = (0..rows + 2)
                .map(|i| if i % 3 == 2 { None } else { Some((i * 7) % rows) })
                .collect();
            t.gather_rows(x, picks)
        }
        Unary::Norm => t.norm(x, 1e-9),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn unary_ops(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in UNARY {
            // Log and sqrt need positive inputs; relu stays away from its kink.
            let x = match op {
                Unary::Log | Unary::Sqrt => random(&mut rng, &[rows, cols], 0.2, 2.0),
                _ => random(&mut rng, &[rows, cols], -2.0, 2.0).map(|v| if v.abs() < 0.01 { 0.5 } else { v }),
            };
            check(&[x], seed, |t, ids| apply(op, t, ids[0], rows, cols));
        }
    }

    #[test]
    fn binary_ops(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..5, inner in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[rows, cols], -2.0, 2.0);
        let b = random(&mut rng, &[rows, cols], -2.0, 2.0);
        let row = random(&mut rng, &[1, cols], -2.0, 2.0);
        let s = random(&mut rng, &[1], -2.0, 2.0);
        check(&[a.clone(), b.clone()], seed, |t, i| t.add(i[0], i[1]));
        check(&[a.clone(), b.clone()], seed, |t, i| t.sub(i[0], i[1]));
        check(&[a.clone(), b.clone()], seed, |t, i| t.mul(i[0], i[1]));
        check(&[a.clone(), row.clone()], seed, |t, i| t.add(i[0], i[1]));
        check(&[a.clone(), row.clone()], seed, |t, i| t.sub(i[0], i[1]));
        check(&[a.clone(), row], seed, |t, i| t.mul(i[0], i[1]));
        check(&[a.clone(), s], seed, |t, i| t.mul(i[0], i[1]));
        let m = random(&mut rng, &[cols, inner], -2.0, 2.0);
        check(&[a.clone(), m], seed, |t, i| t.matmul(i[0], i[1]));
        check(&[a.clone(), b.clone()], seed, |t, i| t.concat(&[i[0], i[1]]));
        check(&[a, b], seed, |t, i| t.stack_rows(&[i[0], i[1], i[0]]));
    }

    #[test]
    fn mlp_parameters(seed in any::<u64>(), batch in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(&[3, 5, 2], Activation::Tanh, &mut rng);
        let x = random(&mut rng, &[batch, 3], -1.0, 1.0);
        let r = parameter_check(&net, H, |t, m| {
            let b = m.bind(t, true);
            let xi = t.constant(x.clone());
            let y = b.forward(t, xi)?;
            Ok((weigh(t, y, seed)?, b.ids()))
        })
        .unwrap();
        prop_assert!(r.max_rel_error < TOL, "{r:?}");
    }
}

fn lstm_unrolled(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = LstmCell::new(3, 4, &mut rng);
    let xs: Vec<Tensor> = (0..5).map(|_| random(&mut rng, &[2, 3], -1.0, 1.0)).collect();
    parameter_check(&cell, H, |t, m| {
        let b = m.bind(t, true);
        let mut state = b.zero_state(t, 2);
        for x in &xs {
            let xi = t.constant(x.clone());
            state = b.step(t, xi, state)?;
        }
        let y = t.concat(&[state.h, state.c])?;
        Ok((weigh(t, y, seed)?, b.ids()))
    })
    .unwrap()
    .max_rel_error
}

fn relational_unrolled(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = RelationalConfig {
        n_planets: 2,
        action_width: 2,
        effect_width: 3,
        hidden: vec![6],
        reward_hidden: 4,
    };
    let model = RelationalModel::new(config.clone(), &mut rng);
    let mut s0 = random(&mut rng, &[1, config.state_width()], -1.0, 1.0);
    // Planet masses positive so distances stay away from zero.
    for p in 0..config.n_planets {
        s0.data_mut()[5 + 3 * p + 2] = 1.0 + p as f64;
    }
    let actions: Vec<Tensor> = (0..5).map(|_| random(&mut rng, &[1, 2], -1.0, 1.0)).collect();
    parameter_check(&model, H, |t, m| {
        let b = m.bind(t, true);
        let mut s = t.constant(s0.clone());
        let mut rewards = Vec::new();
        for a in &actions {
            let ai = t.constant(a.clone());
            let out = b.forward(t, s, ai)?;
            s = out.next_state;
            rewards.push(out.reward);
        }
        rewards.push(s);
        let y = t.concat(&rewards)?;
        Ok((weigh(t, y, seed).map_err(NnError::from)?, b.ids()))
    })
    .unwrap()
    .max_rel_error
}

#[test]
fn lstm_five_step_unroll() {
    for seed in 0..4 {
        let e = lstm_unrolled(seed);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}

#[test]
fn relational_five_step_unroll() {
    for seed in 0..4 {
        let e = relational_unrolled(seed);
        assert!(e < TOL, "seed {seed}: {e}");
    }
}
