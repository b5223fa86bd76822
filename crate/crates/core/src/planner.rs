//! The continuous planning agent on the spaceship task.
//!
//! Every iteration of an episode the manager picks a [`Route`]: act in the
//! world, imagine an action from the current real state, or imagine one
//! from the most recently imagined state. The controller proposes the
//! action, the learned model (or the world) evaluates it, and the memory
//! folds a record of the step into the plan context.
//!
//! The controller's output is a velocity change `dv`; the thrust applied to
//! a ship of mass `m` is `m / dt * dv`, so one network output scale serves
//! ships of every mass. The model consumes the same `dv` (after noise).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, NodeId, Tape, Tensor};
use crate::nn::{
    categorical_head, Activation, BoundLstm, BoundMlp, BoundRelational, LstmCell, LstmState, Mlp, NnError, Parameters,
    RelationalConfig, RelationalModel,
};
use crate::rng::{SeedTree, Stream};
use crate::spaceship::{apply_with_noise, Scene, TaskConfig, ThrustAction, OBS_WIDTH};
use crate::tree::{ImaginationTree, TreeError};

/// Stabilises the gradient of Euclidean norms at zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlannerError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    Act,
    ImagineFromReal,
    ImagineFromLast,
}

impl Route {
    pub const ALL: [Route; 3] = [Route::Act, Route::ImagineFromReal, Route::ImagineFromLast];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_imagination(self) -> bool {
        self != Route::Act
    }
}

/// How imagined steps may be chained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Always imagine from the real state.
    OneStep,
    /// Always imagine from the last imagined state.
    NStep,
    /// Choose between the two.
    Tree,
}

impl Strategy {
    /// Routes the manager may choose after `k` imaginations in this slot.
    pub fn route_mask(self, k: usize, limits: &EpisodeLimits) -> [bool; 3] {
        if k >= limits.max_imagined_steps {
            return [true, false, false];
        }
        match self {
            Strategy::OneStep => [true, true, false],
            Strategy::NStep => [true, false, true],
            Strategy::Tree => [true, true, true],
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "onestep" | "one-step" | "1-step" => Ok(Strategy::OneStep),
            "nstep" | "n-step" => Ok(Strategy::NStep),
            "tree" => Ok(Strategy::Tree),
            other => Err(format!("unknown strategy {other:?} (expected onestep, nstep or tree)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeLimits {
    pub max_real_steps: usize,
    /// Imaginations allowed between two real actions.
    pub max_imagined_steps: usize,
}

impl EpisodeLimits {
    pub fn new(max_real_steps: usize, max_imagined_steps: usize) -> Self {
        Self {
            max_real_steps,
            max_imagined_steps,
        }
    }
}

/// Price of one imagination step, charged to the manager only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ResourceSchedule {
    Fixed {
        tau: f64,
    },
    /// `per_execution * j` after `j` executed actions.
    Ramp {
        per_execution: f64,
    },
}

impl Default for ResourceSchedule {
    fn default() -> Self {
        ResourceSchedule::Fixed { tau: 0.0 }
    }
}

impl ResourceSchedule {
    pub fn ramp() -> Self {
        ResourceSchedule::Ramp { per_execution: 0.5 }
    }

    /// Cost of one imagination step taken after `executed` real actions.
    pub fn cost(&self, executed: usize) -> f64 {
        match *self {
            ResourceSchedule::Fixed { tau } => tau,
            ResourceSchedule::Ramp { per_execution } => per_execution * executed as f64,
        }
    }
}

/// Layer widths of the agent's networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub manager_hidden: Vec<usize>,
    pub controller_hidden: Vec<usize>,
    pub memory_hidden: usize,
    pub model: RelationalConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            manager_hidden: vec![64, 64],
            controller_hidden: vec![128, 128],
            memory_hidden: 128,
            model: RelationalConfig::default(),
        }
    }
}

/// Width of the feature vector the memory receives per step: route
/// one-hot, real state, source state, action, resulting state, reward and
/// the two counters.
pub const RECORD_WIDTH: usize = 3 + OBS_WIDTH * 3 + 2 + 1 + 2;

/// Manager input: real state, plan context, counters.
fn manager_input_width(memory_hidden: usize) -> usize {
    OBS_WIDTH + memory_hidden + 2
}

/// Controller input: source state and plan context.
fn controller_input_width(memory_hidden: usize) -> usize {
    OBS_WIDTH + memory_hidden
}

/// All learnable parameters of the agent, in three disjoint groups plus
/// the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub config: AgentConfig,
    pub manager: Mlp,
    pub controller: Mlp,
    pub memory: LstmCell,
    pub model: RelationalModel,
}

impl AgentParams {
    pub fn new(config: AgentConfig, rng: &mut impl Rng) -> Self {
        let h = config.memory_hidden;
        let mut sizes = vec![manager_input_width(h)];
        sizes.extend(&config.manager_hidden);
        sizes.push(3);
        let mut manager = Mlp::new(&sizes, Activation::Tanh, rng);
        // Start from a uniform route distribution.
        if let Some(last) = manager.layers.last_mut() {
            last.weight.scale_in_place(0.0);
            last.bias.scale_in_place(0.0);
        }
        let mut sizes = vec![controller_input_width(h)];
        sizes.extend(&config.controller_hidden);
        sizes.push(2);
        let mut controller = Mlp::new(&sizes, Activation::Tanh, rng);
        if let Some(last) = controller.layers.last_mut() {
            last.weight.scale_in_place(0.1);
        }
        let memory = LstmCell::new(RECORD_WIDTH, h, rng);
        let model = RelationalModel::new(config.model.clone(), rng);
        Self {
            config,
            manager,
            controller,
            memory,
            model,
        }
    }

    /// Deterministic initialisation from the `Init` stream.
    pub fn seeded(config: AgentConfig, seeds: &SeedTree) -> Self {
        Self::new(config, &mut seeds.rng(Stream::Init, 0))
    }

    pub fn controller_memory_tensors(&self) -> Vec<&Tensor> {
        let mut t = self.controller.tensors();
        t.extend(self.memory.tensors());
        t
    }

    pub fn controller_memory_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.controller.tensors_mut();
        t.extend(self.memory.tensors_mut());
        t
    }

    /// Every tensor with a stable name, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let groups: [(&str, Vec<&Tensor>); 4] = [
            ("manager", self.manager.tensors()),
            ("controller", self.controller.tensors()),
            ("memory", self.memory.tensors()),
            ("model", self.model.tensors()),
        ];
        for (group, tensors) in groups {
            for (i, t) in tensors.into_iter().enumerate() {
                out.push((format!("{group}.{i}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let groups: [(&str, Vec<&mut Tensor>); 4] = [
            ("manager", self.manager.tensors_mut()),
            ("controller", self.controller.tensors_mut()),
            ("memory", self.memory.tensors_mut()),
            ("model", self.model.tensors_mut()),
        ];
        for (group, tensors) in groups {
            for (i, t) in tensors.into_iter().enumerate() {
                out.push((format!("{group}.{i}"), t));
            }
        }
        out
    }
}

/// Recurrent plan context: the memory cell's hidden and cell state.
#[derive(Clone, Copy, Debug)]
pub struct PlanContext {
    pub state: LstmState,
}

impl PlanContext {
    /// The part of the context other networks read.
    pub fn summary(&self) -> NodeId {
        self.state.h
    }
}

/// The agent's networks bound to one tape.
pub struct BoundAgent {
    pub manager: BoundMlp,
    pub controller: BoundMlp,
    pub memory: BoundLstm,
    pub model: BoundRelational,
}

impl BoundAgent {
    /// Manager, controller and memory become leaves when `trainable`; the
    /// model is always bound as constants.
    pub fn bind(params: &AgentParams, tape: &mut Tape, trainable: bool) -> Self {
        Self {
            manager: params.manager.bind(tape, trainable),
            controller: params.controller.bind(tape, trainable),
            memory: params.memory.bind(tape, trainable),
            model: params.model.bind(tape, false),
        }
    }

    pub fn fresh_context(&self, tape: &mut Tape) -> PlanContext {
        PlanContext {
            state: self.memory.zero_state(tape, 1),
        }
    }
}

/// Normalised `(j, k)` counters as a `[1, 2]` row.
fn counters(j: usize, k: usize, limits: &EpisodeLimits) -> Tensor {
    let frac = |n: usize, max: usize| if max == 0 { 0.0 } else { n as f64 / max as f64 };
    Tensor::row(vec![frac(j, limits.max_real_steps), frac(k, limits.max_imagined_steps)])
}

/// A sampled route with its differentiable log-probability and entropy.
#[derive(Clone, Copy, Debug)]
pub struct RouteChoice {
    pub route: Route,
    pub log_prob: NodeId,
    pub entropy: NodeId,
    pub prob: f64,
}

/// Sample a route. The manager reads detached copies of the real state and
/// context, so its loss never reaches the other networks.
#[allow(clippy::too_many_arguments)]
pub fn manager_route(
    tape: &mut Tape,
    agent: &BoundAgent,
    real_state: NodeId,
    context: &PlanContext,
    strategy: Strategy,
    j: usize,
    k: usize,
    limits: &EpisodeLimits,
    rng: &mut impl Rng,
) -> Result<RouteChoice, PlannerError> {
    let s = tape.detach(real_state);
    let c = tape.detach(context.summary());
    let n = tape.constant(counters(j, k, limits));
    let x = tape.concat(&[s, c, n])?;
    let logits = agent.manager.forward(tape, x)?;
    let mask = strategy.route_mask(k, limits);
    let pick = categorical_head(tape, logits, Some(&mask), rng)?;
    Ok(RouteChoice {
        route: Route::from_index(pick.index).expect("three routes"),
        log_prob: pick.log_prob,
        entropy: pick.entropy,
        prob: pick.probs[pick.index],
    })
}

/// Deterministic velocity-change proposal `[1, 2]` for `source`.
pub fn controller_action(
    tape: &mut Tape,
    agent: &BoundAgent,
    source: NodeId,
    context: &PlanContext,
) -> Result<NodeId, PlannerError> {
    let x = tape.concat(&[source, context.summary()])?;
    Ok(agent.controller.forward(tape, x)?)
}

/// Evaluate an action with the model. Returns `(predicted_state, reward)`.
pub fn imagine(
    tape: &mut Tape,
    agent: &BoundAgent,
    source: NodeId,
    action: NodeId,
) -> Result<(NodeId, NodeId), PlannerError> {
    let out = agent.model.forward(tape, source, action)?;
    Ok((out.next_state, out.reward))
}

/// Numeric payload of one step, as fed to the memory.
pub struct RecordNodes {
    pub route: Route,
    pub real_state: NodeId,
    pub source: NodeId,
    pub action: NodeId,
    pub result: NodeId,
    /// `[1, 1]`.
    pub reward: NodeId,
    pub j: usize,
    pub k: usize,
}

/// One memory step over the flattened record.
pub fn memory_update(
    tape: &mut Tape,
    agent: &BoundAgent,
    context: PlanContext,
    record: &RecordNodes,
    limits: &EpisodeLimits,
) -> Result<PlanContext, PlannerError> {
    let mut onehot = vec![0.0; 3];
    onehot[record.route.index()] = 1.0;
    let onehot = tape.constant(Tensor::row(onehot));
    let n = tape.constant(counters(record.j, record.k, limits));
    let x = tape.concat(&[
        onehot,
        record.real_state,
        record.source,
        record.action,
        record.result,
        record.reward,
        n,
    ])?;
    let state = agent.memory.step(tape, x, context.state)?;
    Ok(PlanContext { state })
}

/// One real or imagined step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub route: Route,
    /// Node of the current imagination tree the step starts from; 0 is the
    /// real state.
    pub parent: usize,
    pub real_state: Vec<f64>,
    pub source_state: Vec<f64>,
    /// Commanded velocity change.
    pub action: [f64; 2],
    pub result_state: Vec<f64>,
    /// Real reward (negative fuel cost) or the model's predicted reward.
    pub reward: f64,
    /// Real actions executed before this step.
    pub j: usize,
    /// Imaginations since the last real action, before this step.
    pub k: usize,
    pub resource_cost: f64,
    /// Realised thrust noise; real steps only.
    pub noise: Option<[f64; 2]>,
    /// Probability of the sampled route.
    pub route_prob: f64,
}

impl StepRecord {
    pub fn is_real(&self) -> bool {
        self.route == Route::Act
    }
}

/// Everything that happened in one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub scene: Scene,
    pub records: Vec<StepRecord>,
    pub fuel_cost: f64,
    pub final_distance: f64,
    pub resource_cost: f64,
    /// Real ship positions after every substep of every action.
    pub path: Vec<[f64; 2]>,
}

impl EpisodeTrace {
    pub fn task_loss(&self) -> f64 {
        self.fuel_cost + self.final_distance
    }

    pub fn imagination_steps(&self) -> usize {
        self.records.iter().filter(|r| !r.is_real()).count()
    }

    /// One JSON object per line: a header with the scene and totals, then
    /// one line per record.
    pub fn to_json_lines(&self) -> String {
        let header = TraceHeader {
            scene: self.scene.clone(),
            fuel_cost: self.fuel_cost,
            final_distance: self.final_distance,
            resource_cost: self.resource_cost,
            path: self.path.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("trace header serialises");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self, PlannerError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(PlannerError::TraceFormat {
            line: 1,
            message: "empty trace".into(),
        })?;
        let header: TraceHeader = serde_json::from_str(first).map_err(|e| PlannerError::TraceFormat {
            line: 1,
            message: e.to_string(),
        })?;
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| PlannerError::TraceFormat {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<StepRecord>, _>>()?;
        Ok(Self {
            scene: header.scene,
            records,
            fuel_cost: header.fuel_cost,
            final_distance: header.final_distance,
            resource_cost: header.resource_cost,
            path: header.path,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    scene: Scene,
    fuel_cost: f64,
    final_distance: f64,
    resource_cost: f64,
    path: Vec<[f64; 2]>,
}

/// One imagination tree per real action. Imaginations left over after the
/// last real action (there are none in complete traces) form a final tree.
pub fn tree_from_trace(records: &[StepRecord]) -> Result<Vec<ImaginationTree>, TreeError> {
    let mut forest = Vec::new();
    let mut parents = vec![None];
    for r in records {
        if r.is_real() {
            forest.push(ImaginationTree::from_parents(std::mem::replace(
                &mut parents,
                vec![None],
            ))?);
        } else {
            parents.push(Some(r.parent));
        }
    }
    if parents.len() > 1 {
        forest.push(ImaginationTree::from_parents(parents)?);
    }
    Ok(forest)
}

/// A real transition, as stored for model learning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Realised velocity change (commanded change with noise applied).
    pub action: [f64; 2],
    pub next_state: Vec<f64>,
    pub reward: f64,
}

/// Random streams of one episode.
pub struct EpisodeRngs<R> {
    pub manager: R,
    pub noise: R,
}

impl EpisodeRngs<crate::rng::Rng> {
    /// Streams for episode `index` under `seeds`.
    pub fn for_episode(seeds: &SeedTree, index: u64) -> Self {
        Self {
            manager: seeds.rng(Stream::Manager, index),
            noise: seeds.rng(Stream::Noise, index),
        }
    }
}

/// Settings shared by every episode of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub task: TaskConfig,
    pub limits: EpisodeLimits,
    pub strategy: Strategy,
    pub schedule: ResourceSchedule,
}

/// Per-decision bookkeeping for the manager update.
#[derive(Clone, Copy, Debug)]
pub struct Decision {
    pub log_prob: NodeId,
    pub entropy: NodeId,
    /// Immediate manager reward: minus the resource cost or minus the fuel
    /// cost; the final distance is added to the last decision.
    pub reward: f64,
}

/// An episode together with the tape that produced it.
pub struct Rollout {
    pub tape: Tape,
    pub agent: BoundAgent,
    pub trace: EpisodeTrace,
    pub decisions: Vec<Decision>,
    /// Scalar task loss node (fuel plus final distance).
    pub task_loss: NodeId,
    pub transitions: Vec<Transition>,
}

impl Rollout {
    /// Return-to-go of the manager reward at every decision.
    pub fn returns_to_go(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.decisions.len()];
        let mut acc = 0.0;
        for (i, d) in self.decisions.iter().enumerate().rev() {
            acc += d.reward;
            g[i] = acc;
        }
        g
    }
}

/// Run one episode on a tape. With `trainable`, manager, controller and
/// memory parameters are leaves so the caller can differentiate.
pub fn rollout(
    params: &AgentParams,
    scene: &Scene,
    spec: &EpisodeSpec,
    rngs: &mut EpisodeRngs<impl Rng>,
    trainable: bool,
) -> Result<Rollout, PlannerError> {
    let limits = &spec.limits;
    let mut tape = Tape::new();
    let agent = BoundAgent::bind(params, &mut tape, trainable);
    let mut context = agent.fresh_context(&mut tape);

    let mass = scene.ship_mass;
    let force_per_dv = mass / spec.task.dt;

    let mut real = scene.clone();
    let mut real_node = tape.constant(Tensor::row(real.observation()));
    let mut last: Option<(NodeId, usize)> = None;
    let (mut j, mut k) = (0usize, 0usize);

    let mut records = Vec::new();
    let mut decisions = Vec::new();
    let mut transitions = Vec::new();
    let mut fuel_nodes = Vec::new();
    let mut fuel_total = 0.0;
    let mut resource_total = 0.0;
    let mut path = vec![real.ship_position];

    while j < limits.max_real_steps {
        let choice = manager_route(
            &mut tape,
            &agent,
            real_node,
            &context,
            spec.strategy,
            j,
            k,
            limits,
            &mut rngs.manager,
        )?;
        // A from-last choice with nothing imagined yet starts at the real
        // state; the record keeps the chosen route.
        let route = choice.route;
        match route {
            Route::Act => {
                let dv = controller_action(&mut tape, &agent, real_node, &context)?;
                let dv_val = tape.value(dv).data().to_vec();
                let force = ThrustAction::new(dv_val[0] * force_per_dv, dv_val[1] * force_per_dv);
                let noise = if spec.task.noise_scale > 0.0 {
                    let normal = rand_distr::Normal::new(0.0, spec.task.noise_scale).expect("finite noise scale");
                    use rand_distr::Distribution;
                    [normal.sample(&mut rngs.noise), normal.sample(&mut rngs.noise)]
                } else {
                    [0.0, 0.0]
                };
                let outcome = apply_with_noise(&real, &force, noise, &spec.task);

                // Reparameterised real step: the model's prediction carries
                // the gradient, the residual to the true next state does not.
                let gain = tape.constant(Tensor::row(vec![1.0 + noise[0], 1.0 + noise[1]]));
                let dv_eff = tape.mul(dv, gain)?;
                let (pred, _) = imagine(&mut tape, &agent, real_node, dv_eff)?;
                let next_obs = outcome.next.observation();
                let residual: Vec<f64> = next_obs
                    .iter()
                    .zip(tape.value(pred).data())
                    .map(|(t, p)| t - p)
                    .collect();
                let residual = tape.constant(Tensor::row(residual));
                let next_node = tape.add(pred, residual)?;

                let speed = tape.norm(dv, NORM_EPS)?;
                let excess = tape.scale(speed, force_per_dv)?;
                let threshold = tape.constant(Tensor::scalar(spec.task.fuel_threshold));
                let excess = tape.sub(excess, threshold)?;
                let excess = tape.scale(excess, spec.task.fuel_price)?;
                let fuel = tape.relu(excess)?;
                fuel_nodes.push(fuel);
                let fuel_val = outcome.fuel_cost;
                fuel_total += fuel_val;

                let reward = tape.constant(Tensor::row(vec![-fuel_val]));
                let rec = RecordNodes {
                    route,
                    real_state: real_node,
                    source: real_node,
                    action: dv,
                    result: next_node,
                    reward,
                    j,
                    k,
                };
                let eff = tape.value(dv_eff).data();
                transitions.push(Transition {
                    state: real.observation(),
                    action: [eff[0], eff[1]],
                    next_state: next_obs.clone(),
                    reward: -fuel_val,
                });
                records.push(StepRecord {
                    route,
                    parent: 0,
                    real_state: real.observation(),
                    source_state: real.observation(),
                    action: [dv_val[0], dv_val[1]],
                    result_state: next_obs,
                    reward: -fuel_val,
                    j,
                    k,
                    resource_cost: 0.0,
                    noise: Some(noise),
                    route_prob: choice.prob,
                });
                decisions.push(Decision {
                    log_prob: choice.log_prob,
                    entropy: choice.entropy,
                    reward: -fuel_val,
                });
                context = memory_update(&mut tape, &agent, context, &rec, limits)?;

                path.extend(outcome.trajectory.iter().map(|s| s.ship_position));
                real = outcome.next;
                real_node = next_node;
                j += 1;
                k = 0;
                last = None;
            }
            Route::ImagineFromReal | Route::ImagineFromLast => {
                let (source, parent) = match (route, last) {
                    (Route::ImagineFromLast, Some((node, idx))) => (node, idx),
                    _ => (real_node, 0),
                };
                let a = controller_action(&mut tape, &agent, source, &context)?;
                let (pred, reward) = imagine(&mut tape, &agent, source, a)?;
                let cost = spec.schedule.cost(j);
                resource_total += cost;
                let a_val = tape.value(a).data().to_vec();
                records.push(StepRecord {
                    route,
                    parent,
                    real_state: real.observation(),
                    source_state: tape.value(source).data().to_vec(),
                    action: [a_val[0], a_val[1]],
                    result_state: tape.value(pred).data().to_vec(),
                    reward: tape.value(reward).item(),
                    j,
                    k,
                    resource_cost: cost,
                    noise: None,
                    route_prob: choice.prob,
                });
                decisions.push(Decision {
                    log_prob: choice.log_prob,
                    entropy: choice.entropy,
                    reward: -cost,
                });
                let rec = RecordNodes {
                    route,
                    real_state: real_node,
                    source,
                    action: a,
                    result: pred,
                    reward,
                    j,
                    k,
                };
                context = memory_update(&mut tape, &agent, context, &rec, limits)?;
                k += 1;
                last = Some((pred, k));
            }
        }
    }

    let pos = tape.slice(real_node, 0, 2)?;
    let distance = tape.norm(pos, NORM_EPS)?;
    let mut task_loss = distance;
    for f in fuel_nodes {
        task_loss = tape.add(task_loss, f)?;
    }
    let final_distance = real.distance_to_target();
    if let Some(d) = decisions.last_mut() {
        d.reward -= final_distance;
    }
    Ok(Rollout {
        trace: EpisodeTrace {
            scene: scene.clone(),
            records,
            fuel_cost: fuel_total,
            final_distance,
            resource_cost: resource_total,
            path,
        },
        tape,
        agent,
        decisions,
        task_loss,
        transitions,
    })
}

/// Run one episode for evaluation.
pub fn run_episode(
    params: &AgentParams,
    scene: &Scene,
    spec: &EpisodeSpec,
    rngs: &mut EpisodeRngs<impl Rng>,
) -> Result<EpisodeTrace, PlannerError> {
    Ok(rollout(params, scene, spec, rngs, false)?.trace)
}
