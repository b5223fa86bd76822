//! Training for the continuous agent.
//!
//! Three disjoint parameter groups are updated independently from the same
//! on-policy minibatch, in a fixed order:
//!
//! 1. the model, by supervised regression on a buffer of real transitions;
//! 2. the manager, by REINFORCE on the negative task-plus-resource loss;
//! 3. the controller and memory, by backpropagation through the unrolled
//!    episode with the routes held fixed and the model frozen.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_global_norm, AdamConfig, AdamState, DiffError, NodeId, Tape, Tensor};
use crate::nn::{NnError, Parameters, RelationalModel};
use crate::planner::{rollout, AgentParams, EpisodeRngs, EpisodeSpec, PlannerError, Transition};
use crate::rng::{SeedTree, Stream};
use crate::spaceship::{sample_scene, Scene};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("iteration {iteration}: {what} is not finite")]
    NonFinite { iteration: u64, what: &'static str },
    #[error("transition buffer is empty")]
    EmptyBuffer,
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model_lr: f64,
    pub controller_lr: f64,
    pub manager_lr: f64,
    pub clip_norm: f64,
    pub batch_episodes: usize,
    pub iterations: u64,
    pub validation_interval: u64,
    pub validation_scenes: usize,
    pub lr_decay: f64,
    pub entropy_coef: f64,
    /// Transitions per model minibatch.
    pub model_batch: usize,
    /// Model minibatch updates per iteration.
    pub model_steps: usize,
    pub buffer_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_lr: 1e-3,
            controller_lr: 3e-4,
            manager_lr: 1e-4,
            clip_norm: 10.0,
            batch_episodes: 64,
            iterations: 2000,
            validation_interval: 1000,
            validation_scenes: 512,
            lr_decay: 0.95,
            entropy_coef: 0.01,
            model_batch: 64,
            model_steps: 1,
            buffer_capacity: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.model_lr > 0.0 && self.controller_lr > 0.0 && self.manager_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("lr_decay must lie in (0, 1)");
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.batch_episodes == 0 || self.model_batch == 0 || self.buffer_capacity == 0 {
            return bad("batch sizes and buffer capacity must be nonzero");
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be nonzero");
        }
        Ok(())
    }
}

/// Ring buffer of executed transitions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl TransitionBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// Mean squared error of the model on `batch`: predicted ship position
/// and velocity change, plus reward. Returns the tape, loss node and the
/// parameter nodes.
fn model_loss(
    model: &RelationalModel,
    batch: &[&Transition],
    trainable: bool,
) -> Result<(Tape, NodeId, Vec<NodeId>), TrainError> {
    let n = batch.len();
    let w = model.config.state_width();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let states: Vec<f64> = batch.iter().flat_map(|t| t.state.iter().copied()).collect();
    let actions: Vec<f64> = batch.iter().flat_map(|t| t.action).collect();
    let mut target = Vec::with_capacity(n * 5);
    for t in batch {
        target.extend((0..4).map(|i| t.next_state[i] - t.state[i]));
        target.push(t.reward);
    }
    let s = tape.constant(Tensor::new(vec![n, w], states)?);
    let a = tape.constant(Tensor::new(vec![n, 2], actions)?);
    let out = bound.forward(&mut tape, s, a)?;
    let pred = tape.concat(&[out.delta, out.reward])?;
    let target = tape.constant(Tensor::new(vec![n, 5], target)?);
    let err = tape.sub(pred, target)?;
    let sq = tape.square(err)?;
    let loss = tape.mean(sq)?;
    Ok((tape, loss, bound.ids()))
}

/// Model loss on a set of transitions without updating anything.
pub fn evaluate_model(model: &RelationalModel, transitions: &[Transition]) -> Result<f64, TrainError> {
    if transitions.is_empty() {
        return Err(TrainError::EmptyBuffer);
    }
    let refs: Vec<&Transition> = transitions.iter().collect();
    let (tape, loss, _) = model_loss(model, &refs, false)?;
    Ok(tape.value(loss).item())
}

/// One supervised update of the model on a minibatch drawn from `buffer`.
/// Returns the minibatch loss before the update.
pub fn train_model(
    buffer: &TransitionBuffer,
    model: &mut RelationalModel,
    opt: &mut AdamState,
    adam: &AdamConfig,
    clip_norm: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64, TrainError> {
    if buffer.is_empty() {
        return Err(TrainError::EmptyBuffer);
    }
    let batch = buffer.sample(batch_size, rng);
    let (tape, loss, ids) = model_loss(model, &batch, true)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?.collect(&ids);
    clip_global_norm(&mut grads, clip_norm);
    opt.update(&mut model.tensors_mut(), &grads, adam)?;
    Ok(value)
}

/// Accumulates REINFORCE gradients episode by episode so that tapes can be
/// dropped before the minibatch baseline is known.
///
/// For each episode two gradients are kept: `a = grad(sum_t G_t log p_t +
/// beta * sum_t H_t)` and `b = grad(sum_t log p_t)`. With baseline `m` (the
/// minibatch mean return) the ascent direction is `sum(a) - m * sum(b)`.
#[derive(Clone, Debug)]
pub struct PolicyGradient {
    sum_a: Vec<Tensor>,
    sum_b: Vec<Tensor>,
    returns: Vec<f64>,
}

impl PolicyGradient {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sum_a: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            sum_b: sum_a.clone(),
            sum_a,
            returns: Vec::new(),
        }
    }

    /// Add one episode. `steps` pairs each decision's log-probability and
    /// entropy nodes; `returns_to_go` has one entry per decision.
    pub fn add_episode(
        &mut self,
        tape: &mut Tape,
        steps: &[(NodeId, NodeId)],
        returns_to_go: &[f64],
        entropy_coef: f64,
        param_ids: &[NodeId],
    ) -> Result<(), TrainError> {
        assert_eq!(steps.len(), returns_to_go.len(), "one return per decision");
        self.returns.push(returns_to_go.first().copied().unwrap_or(0.0));
        if steps.is_empty() {
            return Ok(());
        }
        let zero = tape.constant(Tensor::scalar(0.0));
        let (mut a, mut b) = (zero, zero);
        for (&(lp, h), &g) in steps.iter().zip(returns_to_go) {
            let weighted = tape.scale(lp, g)?;
            a = tape.add(a, weighted)?;
            if entropy_coef != 0.0 {
                let bonus = tape.scale(h, entropy_coef)?;
                a = tape.add(a, bonus)?;
            }
            b = tape.add(b, lp)?;
        }
        let ga = tape.backward(a)?.collect(param_ids);
        let gb = tape.backward(b)?.collect(param_ids);
        for (acc, g) in self.sum_a.iter_mut().zip(&ga) {
            acc.add_assign(g);
        }
        for (acc, g) in self.sum_b.iter_mut().zip(&gb) {
            acc.add_assign(g);
        }
        Ok(())
    }

    pub fn episodes(&self) -> usize {
        self.returns.len()
    }

    pub fn baseline(&self) -> f64 {
        if self.returns.is_empty() {
            0.0
        } else {
            self.returns.iter().sum::<f64>() / self.returns.len() as f64
        }
    }

    /// Gradient of the loss to minimise (the negated ascent direction),
    /// averaged over episodes.
    pub fn loss_gradient(&self) -> Vec<Tensor> {
        let n = self.returns.len().max(1) as f64;
        let b = self.baseline();
        self.sum_a
            .iter()
            .zip(&self.sum_b)
            .map(|(a, gb)| {
                let mut g = a.clone();
                g.axpy(-b, gb);
                g.scale_in_place(-1.0 / n);
                g
            })
            .collect()
    }
}

/// Apply a REINFORCE update to `params` from an accumulated batch.
pub fn reinforce_manager(
    batch: &PolicyGradient,
    params: &mut [&mut Tensor],
    opt: &mut AdamState,
    adam: &AdamConfig,
    clip_norm: f64,
) -> Result<f64, TrainError> {
    let mut grads = batch.loss_gradient();
    let norm = clip_global_norm(&mut grads, clip_norm);
    opt.update(params, &grads, adam)?;
    Ok(norm)
}

/// Outcome of [`bandit_gradient_check`], per logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditCheck {
    /// Ascent direction estimated by [`PolicyGradient`].
    pub estimate: Vec<f64>,
    /// `p_i * (r_i - sum_j p_j r_j)`.
    pub analytic: Vec<f64>,
    /// Standard error of the per-sample estimates.
    pub std_err: Vec<f64>,
}

impl BanditCheck {
    /// Largest deviation in units of standard error.
    pub fn max_z(&self) -> f64 {
        self.estimate
            .iter()
            .zip(&self.analytic)
            .zip(&self.std_err)
            .map(|((e, a), s)| {
                if *s > 0.0 {
                    (e - a).abs() / s
                } else if e == a {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// REINFORCE on a one-step bandit over routes with fixed payoffs: draw
/// `samples` routes from `softmax(logits)`, estimate the return gradient
/// with the minibatch-mean baseline, and compare with the closed form.
pub fn bandit_gradient_check(
    logits: &[f64],
    payoffs: &[f64],
    samples: usize,
    rng: &mut impl Rng,
) -> Result<BanditCheck, TrainError> {
    assert_eq!(logits.len(), payoffs.len(), "one payoff per route");
    let theta = Tensor::row(logits.to_vec());
    let mut pg = PolicyGradient::new([&theta]);
    let mut per_sample: Vec<(f64, Vec<f64>)> = Vec::with_capacity(samples);
    let mut probs = Vec::new();
    for _ in 0..samples {
        let mut tape = Tape::new();
        let id = tape.leaf(theta.clone());
        let pick = crate::nn::categorical_head(&mut tape, id, None, rng)?;
        let r = payoffs[pick.index];
        per_sample.push((r, tape.backward(pick.log_prob)?.wrt(id).into_data()));
        pg.add_episode(&mut tape, &[(pick.log_prob, pick.entropy)], &[r], 0.0, &[id])?;
        probs = pick.probs;
    }
    let estimate: Vec<f64> = pg.loss_gradient()[0].data().iter().map(|g| -g).collect();
    let mean_r: f64 = probs.iter().zip(payoffs).map(|(p, r)| p * r).sum();
    let analytic = probs.iter().zip(payoffs).map(|(p, r)| p * (r - mean_r)).collect();
    let b = pg.baseline();
    let n = samples as f64;
    let std_err = (0..logits.len())
        .map(|i| {
            let xs: Vec<f64> = per_sample.iter().map(|(r, g)| (r - b) * g[i]).collect();
            let m = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(BanditCheck {
        estimate,
        analytic,
        std_err,
    })
}

/// Averaged value gradients of the task loss for controller and memory,
/// accumulated episode by episode.
#[derive(Clone, Debug)]
pub struct ValueGradient {
    sum: Vec<Tensor>,
    episodes: usize,
}

impl ValueGradient {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        Self {
            sum: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
            episodes: 0,
        }
    }

    pub fn add_episode(&mut self, tape: &Tape, task_loss: NodeId, param_ids: &[NodeId]) -> Result<(), TrainError> {
        let g = tape.backward(task_loss)?.collect(param_ids);
        for (acc, g) in self.sum.iter_mut().zip(&g) {
            acc.add_assign(g);
        }
        self.episodes += 1;
        Ok(())
    }

    pub fn gradient(&self) -> Vec<Tensor> {
        let n = self.episodes.max(1) as f64;
        self.sum
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.scale_in_place(1.0 / n);
                g
            })
            .collect()
    }
}

/// Apply the controller-and-memory update.
pub fn svg_controller_memory(
    batch: &ValueGradient,
    params: &mut [&mut Tensor],
    opt: &mut AdamState,
    adam: &AdamConfig,
    clip_norm: f64,
) -> Result<f64, TrainError> {
    let mut grads = batch.gradient();
    let norm = clip_global_norm(&mut grads, clip_norm);
    opt.update(params, &grads, adam)?;
    Ok(norm)
}

/// Summary of a batch of evaluation episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub task_loss: f64,
    pub fuel_cost: f64,
    pub final_distance: f64,
    pub resource_cost: f64,
    pub imaginations: f64,
    pub model_loss: f64,
}

/// Run `scenes` with fixed streams and no learning.
pub fn evaluate(
    params: &AgentParams,
    spec: &EpisodeSpec,
    scenes: &[Scene],
    seeds: &SeedTree,
) -> Result<EvalSummary, TrainError> {
    let mut s = EvalSummary {
        episodes: scenes.len(),
        ..Default::default()
    };
    let mut transitions = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let mut rngs = EpisodeRngs::for_episode(seeds, i as u64);
        let r = rollout(params, scene, spec, &mut rngs, false)?;
        s.task_loss += r.trace.task_loss();
        s.fuel_cost += r.trace.fuel_cost;
        s.final_distance += r.trace.final_distance;
        s.resource_cost += r.trace.resource_cost;
        s.imaginations += r.trace.imagination_steps() as f64;
        transitions.extend(r.transitions);
    }
    let n = scenes.len().max(1) as f64;
    s.task_loss /= n;
    s.fuel_cost /= n;
    s.final_distance /= n;
    s.resource_cost /= n;
    s.imaginations /= n;
    if !transitions.is_empty() {
        s.model_loss = evaluate_model(&params.model, &transitions)?;
    }
    Ok(s)
}

/// Scenes drawn from one stream, indices `0..n`.
pub fn scene_set(seeds: &SeedTree, stream: Stream, n: usize, spec: &EpisodeSpec) -> Vec<Scene> {
    (0..n)
        .map(|i| sample_scene(&mut seeds.rng(stream, i as u64), &spec.task))
        .collect()
}

/// Current learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub model: f64,
    pub controller: f64,
    pub manager: f64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub model_loss: f64,
    pub task_loss: f64,
    pub resource_cost: f64,
    pub manager_return: f64,
    pub imaginations: f64,
    pub route_entropy: f64,
    pub manager_grad_norm: f64,
    pub controller_grad_norm: f64,
    pub lr_model: f64,
    pub lr_controller: f64,
    pub lr_manager: f64,
}

/// Validation losses used for the learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationLosses {
    pub model: f64,
    pub task: f64,
    /// Task plus resource loss.
    pub total: f64,
}

/// Full training state; everything needed to resume bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub spec: EpisodeSpec,
    pub seeds: SeedTree,
    pub params: AgentParams,
    pub model_opt: AdamState,
    pub manager_opt: AdamState,
    pub controller_opt: AdamState,
    pub lrs: LearningRates,
    pub buffer: TransitionBuffer,
    pub iteration: u64,
    pub last_validation: Option<ValidationLosses>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        spec: EpisodeSpec,
        params: AgentParams,
        seeds: SeedTree,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            model_opt: AdamState::new(params.model.tensors()),
            manager_opt: AdamState::new(params.manager.tensors()),
            controller_opt: AdamState::new(params.controller_memory_tensors()),
            lrs: LearningRates {
                model: config.model_lr,
                controller: config.controller_lr,
                manager: config.manager_lr,
            },
            buffer: TransitionBuffer::new(config.buffer_capacity),
            iteration: 0,
            last_validation: None,
            config,
            spec,
            params,
            seeds,
        })
    }

    /// Collect one minibatch and apply the three updates.
    pub fn step(&mut self) -> Result<IterationMetrics, TrainError> {
        let it = self.iteration;
        let n = self.config.batch_episodes;
        let mut pg = PolicyGradient::new(self.params.manager.tensors());
        let mut vg = ValueGradient::new(self.params.controller_memory_tensors());
        let (mut task, mut resource, mut imag, mut entropy, mut decisions) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut new_transitions = Vec::new();
        for e in 0..n {
            let index = it * n as u64 + e as u64;
            let scene = sample_scene(&mut self.seeds.rng(Stream::Env, index), &self.spec.task);
            let mut rngs = EpisodeRngs::for_episode(&self.seeds, index);
            let mut r = rollout(&self.params, &scene, &self.spec, &mut rngs, true)?;
            let cm_ids: Vec<NodeId> = r
                .agent
                .controller
                .ids()
                .into_iter()
                .chain(r.agent.memory.ids())
                .collect();
            vg.add_episode(&r.tape, r.task_loss, &cm_ids)?;
            let steps: Vec<(NodeId, NodeId)> = r.decisions.iter().map(|d| (d.log_prob, d.entropy)).collect();
            let g = r.returns_to_go();
            let manager_ids = r.agent.manager.ids();
            for d in &r.decisions {
                entropy += r.tape.value(d.entropy).item();
            }
            decisions += r.decisions.len();
            pg.add_episode(&mut r.tape, &steps, &g, self.config.entropy_coef, &manager_ids)?;
            task += r.trace.task_loss();
            resource += r.trace.resource_cost;
            imag += r.trace.imagination_steps() as f64;
            new_transitions.extend(r.transitions);
        }
        for t in new_transitions {
            self.buffer.push(t);
        }

        // 1. model
        let mut batch_rng = self.seeds.rng(Stream::Batch, it);
        let mut model_loss = 0.0;
        let adam = AdamConfig::with_lr(self.lrs.model);
        for _ in 0..self.config.model_steps {
            model_loss += train_model(
                &self.buffer,
                &mut self.params.model,
                &mut self.model_opt,
                &adam,
                self.config.clip_norm,
                self.config.model_batch,
                &mut batch_rng,
            )?;
        }
        model_loss /= self.config.model_steps.max(1) as f64;

        // 2. manager
        let manager_return = pg.baseline();
        let manager_grad_norm = reinforce_manager(
            &pg,
            &mut self.params.manager.tensors_mut(),
            &mut self.manager_opt,
            &AdamConfig::with_lr(self.lrs.manager),
            self.config.clip_norm,
        )?;

        // 3. controller and memory
        let controller_grad_norm = svg_controller_memory(
            &vg,
            &mut self.params.controller_memory_tensors_mut(),
            &mut self.controller_opt,
            &AdamConfig::with_lr(self.lrs.controller),
            self.config.clip_norm,
        )?;

        let nf = n as f64;
        let m = IterationMetrics {
            iteration: it,
            model_loss,
            task_loss: task / nf,
            resource_cost: resource / nf,
            manager_return,
            imaginations: imag / nf,
            route_entropy: if decisions == 0 {
                0.0
            } else {
                entropy / decisions as f64
            },
            manager_grad_norm,
            controller_grad_norm,
            lr_model: self.lrs.model,
            lr_controller: self.lrs.controller,
            lr_manager: self.lrs.manager,
        };
        for (what, v) in [
            ("model loss", m.model_loss),
            ("task loss", m.task_loss),
            ("manager gradient", m.manager_grad_norm),
            ("controller gradient", m.controller_grad_norm),
        ] {
            if !v.is_finite() {
                return Err(TrainError::NonFinite { iteration: it, what });
            }
        }
        self.iteration += 1;
        if self.iteration.is_multiple_of(self.config.validation_interval) {
            self.validate_and_decay()?;
        }
        Ok(m)
    }

    /// Validation losses on the held-out scene set.
    pub fn validation_losses(&self) -> Result<ValidationLosses, TrainError> {
        let scenes = scene_set(
            &self.seeds,
            Stream::Validation,
            self.config.validation_scenes,
            &self.spec,
        );
        let s = evaluate(&self.params, &self.spec, &scenes, &self.seeds.child(1))?;
        Ok(ValidationLosses {
            model: s.model_loss,
            task: s.task_loss,
            total: s.task_loss + s.resource_cost,
        })
    }

    /// Decay each learning rate whose validation loss went up.
    pub fn validate_and_decay(&mut self) -> Result<ValidationLosses, TrainError> {
        let v = self.validation_losses()?;
        if let Some(prev) = self.last_validation {
            apply_decay(&mut self.lrs, &prev, &v, self.config.lr_decay);
        }
        self.last_validation = Some(v);
        Ok(v)
    }

    /// Run the remaining iterations, calling `log` after each.
    pub fn run(&mut self, mut log: impl FnMut(&IterationMetrics)) -> Result<(), TrainError> {
        while self.iteration < self.config.iterations {
            let m = self.step()?;
            log(&m);
        }
        Ok(())
    }
}

/// The learning-rate rule: multiply a rate by `decay` when its component's
/// validation loss rose.
pub fn apply_decay(lrs: &mut LearningRates, prev: &ValidationLosses, now: &ValidationLosses, decay: f64) {
    if now.model > prev.model {
        lrs.model *= decay;
    }
    if now.task > prev.task {
        lrs.controller *= decay;
    }
    if now.total > prev.total {
        lrs.manager *= decay;
    }
}

/// Draw `n` distinct indices from `0..len`; used for subsampling.
pub fn choose_indices(len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let all: Vec<usize> = (0..len).collect();
    all.choose_multiple(rng, n.min(len)).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{categorical_head, RelationalConfig};
    use crate::planner::{AgentConfig, EpisodeLimits, ResourceSchedule, Strategy};
    use crate::spaceship::TaskConfig;

    fn small_spec(limits: EpisodeLimits) -> EpisodeSpec {
        EpisodeSpec {
            task: TaskConfig::default(),
            limits,
            strategy: Strategy::Tree,
            schedule: ResourceSchedule::default(),
        }
    }

    fn one_transition() -> Transition {
        let state: Vec<f64> = (0..20).map(|i| 0.05 * i as f64).collect();
        let mut next = state.clone();
        next[0] += 0.3;
        next[3] -= 0.2;
        Transition {
            state,
            action: [0.1, -0.4],
            next_state: next,
            reward: -0.01,
        }
    }

    #[test]
    fn model_memorises_one_transition() {
        let seeds = SeedTree::new(1);
        let mut model = RelationalModel::new(RelationalConfig::default(), &mut seeds.rng(Stream::Init, 0));
        let mut buf = TransitionBuffer::new(10);
        buf.push(one_transition());
        let mut opt = AdamState::new(model.tensors());
        let adam = AdamConfig::with_lr(1e-3);
        let mut rng = seeds.rng(Stream::Batch, 0);
        let mut loss = f64::INFINITY;
        for _ in 0..1500 {
            loss = train_model(&buf, &mut model, &mut opt, &adam, 10.0, 4, &mut rng).unwrap();
        }
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let seeds = SeedTree::new(2);
        let mut model = RelationalModel::new(RelationalConfig::default(), &mut seeds.rng(Stream::Init, 0));
        let before = model.clone();
        let mut buf = TransitionBuffer::new(10);
        buf.push(one_transition());
        let mut opt = AdamState::new(model.tensors());
        let loss = train_model(
            &buf,
            &mut model,
            &mut opt,
            &AdamConfig::with_lr(0.0),
            10.0,
            2,
            &mut seeds.rng(Stream::Batch, 0),
        )
        .unwrap();
        assert!(loss > 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut buf = TransitionBuffer::new(2);
        for r in 0..3 {
            let mut t = one_transition();
            t.reward = r as f64;
            buf.push(t);
        }
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0]);
    }

    #[test]
    fn equal_returns_cancel() {
        let logits = Tensor::row(vec![0.3, -0.1]);
        let mut pg = PolicyGradient::new([&logits]);
        for i in 0..8 {
            let mut tape = Tape::new();
            let l = tape.leaf(logits.clone());
            let pick = categorical_head(&mut tape, l, None, &mut SeedTree::new(i).rng(Stream::Manager, 0)).unwrap();
            pg.add_episode(&mut tape, &[(pick.log_prob, pick.entropy)], &[2.5], 0.0, &[l])
                .unwrap();
        }
        for g in pg.loss_gradient() {
            assert!(g.data().iter().all(|v| v.abs() < 1e-12), "{g:?}");
        }
    }

    #[test]
    fn decay_only_on_increase() {
        let mut lrs = LearningRates {
            model: 1.0,
            controller: 1.0,
            manager: 1.0,
        };
        let a = ValidationLosses {
            model: 1.0,
            task: 1.0,
            total: 1.0,
        };
        let b = ValidationLosses {
            model: 0.5,
            task: 2.0,
            total: 0.9,
        };
        apply_decay(&mut lrs, &a, &b, 0.95);
        assert_eq!((lrs.model, lrs.controller, lrs.manager), (1.0, 0.95, 1.0));
    }

    #[test]
    fn updates_touch_only_their_group() {
        let seeds = SeedTree::new(5);
        let params = AgentParams::seeded(AgentConfig::default(), &seeds);
        let mut cfg = TrainConfig {
            batch_episodes: 2,
            iterations: 1,
            ..Default::default()
        };
        cfg.validation_interval = 1000;
        let mut tr = Trainer::new(cfg, small_spec(EpisodeLimits::new(1, 2)), params.clone(), seeds).unwrap();
        tr.step().unwrap();
        assert_ne!(tr.params.model, params.model);
        assert_ne!(tr.params.controller, params.controller);
        assert_ne!(tr.params.memory, params.memory);
        assert_ne!(tr.params.manager, params.manager);

        // A manager-only update leaves the other groups alone.
        let mut p2 = params.clone();
        let pg = PolicyGradient::new(p2.manager.tensors());
        let mut opt = AdamState::new(p2.manager.tensors());
        reinforce_manager(
            &pg,
            &mut p2.manager.tensors_mut(),
            &mut opt,
            &AdamConfig::default(),
            10.0,
        )
        .unwrap();
        assert_eq!(p2.controller, params.controller);
        assert_eq!(p2.memory, params.memory);
        assert_eq!(p2.model, params.model);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let seeds = SeedTree::new(9);
            let params = AgentParams::seeded(AgentConfig::default(), &seeds);
            let cfg = TrainConfig {
                batch_episodes: 2,
                iterations: 3,
                ..Default::default()
            };
            let mut tr = Trainer::new(cfg, small_spec(EpisodeLimits::new(2, 1)), params, seeds).unwrap();
            let mut log = Vec::new();
            tr.run(|m| log.push(serde_json::to_string(m).unwrap())).unwrap();
            (log, tr.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = TrainConfig {
            lr_decay: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
