//! Interaction-network style dynamics model for the spaceship scene.
//!
//! Bodies are the ship (dynamic) and the planets (static). A relation
//! network maps every (planet -> ship) pair to an effect vector; effects
//! are summed and fed, together with the ship's own features and the action
//! features, to an object network that predicts the ship's state change.
//! Planets never move, so relations received by planets are not evaluated.
//!
//! The effect sum is taken in an order fixed by the planets' feature values
//! rather than their slot index, which makes the prediction bit-identical
//! under any permutation of the planet slots.

use serde::{Deserialize, Serialize};

use super::{Activation, BoundMlp, Mlp, NnError, Parameters};
use crate::diffcore::{NodeId, Tape, Tensor};

/// Ship features: position (2), velocity (2), mass (1).
pub const SHIP_FEATURES: usize = 5;
/// Uniform per-body features: position (2), velocity (2), mass (1).
pub const BODY_FEATURES: usize = 5;
/// Features per planet in the observation vector: position (2), mass (1).
pub const PLANET_OBS: usize = 3;
/// Relation input: sender body, receiver body, offset (2), distance (1).
const RELATION_INPUT: usize = 2 * BODY_FEATURES + 3;
/// Predicted change of ship position and velocity.
const DELTA: usize = 4;
const DIST_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationalConfig {
    pub n_planets: usize,
    pub action_width: usize,
    pub effect_width: usize,
    pub hidden: Vec<usize>,
    pub reward_hidden: usize,
}

impl Default for RelationalConfig {
    fn default() -> Self {
        Self {
            n_planets: 5,
            action_width: 2,
            effect_width: 16,
            hidden: vec![64, 64],
            reward_hidden: 32,
        }
    }
}

impl RelationalConfig {
    pub fn state_width(&self) -> usize {
        SHIP_FEATURES + PLANET_OBS * self.n_planets
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationalModel {
    pub config: RelationalConfig,
    pub relation: Mlp,
    pub object: Mlp,
    pub reward: Mlp,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl RelationalModel {
    pub fn new(config: RelationalConfig, rng: &mut impl rand::Rng) -> Self {
        let relation = Mlp::new(
            &sizes(RELATION_INPUT, &config.hidden, config.effect_width),
            Activation::Relu,
            rng,
        );
        let object = Mlp::new(
            &sizes(
                SHIP_FEATURES + config.effect_width + config.action_width,
                &config.hidden,
                DELTA,
            ),
            Activation::Relu,
            rng,
        );
        let reward = Mlp::new(
            &[DELTA + config.action_width, config.reward_hidden, 1],
            Activation::Tanh,
            rng,
        );
        Self {
            config,
            relation,
            object,
            reward,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundRelational {
        BoundRelational {
            config: self.config.clone(),
            relation: self.relation.bind(tape, trainable),
            object: self.object.bind(tape, trainable),
            reward: self.reward.bind(tape, trainable),
        }
    }
}

impl Parameters for RelationalModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.relation.tensors();
        t.extend(self.object.tensors());
        t.extend(self.reward.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.relation.tensors_mut();
        t.extend(self.object.tensors_mut());
        t.extend(self.reward.tensors_mut());
        t
    }
}

/// Outputs of one model evaluation, all `[batch, ..]` nodes.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Full predicted observation (planets copied through).
    pub next_state: NodeId,
    /// Predicted change of ship position and velocity.
    pub delta: NodeId,
    /// Predicted scalar reward per row.
    pub reward: NodeId,
}

#[derive(Clone, Debug)]
pub struct BoundRelational {
    config: RelationalConfig,
    relation: BoundMlp,
    object: BoundMlp,
    reward: BoundMlp,
}

impl BoundRelational {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.relation.ids();
        ids.extend(self.object.ids());
        ids.extend(self.reward.ids());
        ids
    }

    /// Predict the next observation from `state: [B, 5 + 3P]` and
    /// `action: [B, action_width]`.
    pub fn forward(&self, tape: &mut Tape, state: NodeId, action: NodeId) -> Result<ModelOutput, NnError> {
        let width = self.config.state_width();
        let got = tape.value(state).last_dim();
        if got != width || tape.value(state).rank() != 2 {
            return Err(NnError::BodyCount {
                expected: self.config.n_planets,
                got_width: got,
            });
        }
        let got = tape.value(action).last_dim();
        if got != self.config.action_width {
            return Err(NnError::Width {
                what: "model action",
                expected: self.config.action_width,
                got,
            });
        }
        let batch = tape.value(state).shape()[0];
        let n = self.config.n_planets;

        let ship = tape.slice(state, 0, SHIP_FEATURES)?;
        let ship_pos = tape.slice(state, 0, 2)?;
        let zeros2 = tape.constant(Tensor::zeros(&[batch, 2]));
        let ones = tape.constant(Tensor::filled(&[2, 1], 1.0));
        let eps = tape.constant(Tensor::scalar(DIST_EPS));

        let mut rows = Vec::with_capacity(n);
        for p in 0..n {
            let base = SHIP_FEATURES + PLANET_OBS * p;
            let pos = tape.slice(state, base, base + 2)?;
            let mass = tape.slice(state, base + 2, base + 3)?;
            let body = tape.concat(&[pos, zeros2, mass])?;
            let offset = tape.sub(pos, ship_pos)?;
            let sq = tape.square(offset)?;
            let d2 = tape.matmul(sq, ones)?;
            let d2 = tape.add(d2, eps)?;
            let dist = tape.sqrt(d2)?;
            rows.push(tape.concat(&[body, ship, offset, dist])?);
        }
        let stacked = tape.stack_rows(&rows)?;
        let effects = self.relation.forward(tape, stacked)?;

        // Canonical summation order per batch row.
        let sv = tape.value(state).clone();
        let orders: Vec<Vec<usize>> = (0..batch)
            .map(|b| {
                let row = &sv.data()[b * width..(b + 1) * width];
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&x, &y| {
                    let fx = &row[SHIP_FEATURES + PLANET_OBS * x..SHIP_FEATURES + PLANET_OBS * (x + 1)];
                    let fy = &row[SHIP_FEATURES + PLANET_OBS * y..SHIP_FEATURES + PLANET_OBS * (y + 1)];
                    fx.iter()
                        .zip(fy)
                        .map(|(a, b)| a.total_cmp(b))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                idx
            })
            .collect();
        let mut aggregate: Option<NodeId> = None;
        #[allow(clippy::needless_range_loop)]
        for rank in 0..n {
            let pick = (0..batch).map(|b| Some(orders[b][rank] * batch + b)).collect();
            let e = tape.gather_rows(effects, pick)?;
            aggregate = Some(match aggregate {
                None => e,
                Some(acc) => tape.add(acc, e)?,
            });
        }
        let aggregate = match aggregate {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(&[batch, self.config.effect_width])),
        };

        let obj_in = tape.concat(&[ship, aggregate, action])?;
        let delta = self.object.forward(tape, obj_in)?;
        let posvel = tape.slice(state, 0, DELTA)?;
        let moved = tape.add(posvel, delta)?;
        let rest = tape.slice(state, DELTA, width)?;
        let next_state = tape.concat(&[moved, rest])?;
        let rew_in = tape.concat(&[delta, action])?;
        let reward = self.reward.forward(tape, rew_in)?;
        Ok(ModelOutput {
            next_state,
            delta,
            reward,
        })
    }
}
