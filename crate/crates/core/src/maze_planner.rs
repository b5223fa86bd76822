//! The discrete agent for maze tasks.
//!
//! The controller is a tabular Q function over positions, shared by every
//! goal of a maze, so states are aliased: the agent cannot tell from its
//! position alone which candidate goal is live. Imagination disambiguates.
//! Each imagined rollout uses the perfect model and is folded into an
//! additive history tensor `c` by one-step value backups; actions are taken
//! greedily on `q + c`.
//!
//! Between two real actions the manager grows a search tree of imagined
//! rollouts. Three kinds are provided: the fixed best-first manager, the
//! 1-step and n-step baselines, and a learned convolutional manager that
//! picks among act / imagine from the real state / imagine from the last
//! imagined state.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{clip_global_norm, AdamConfig, AdamState, DiffError, NodeId, Tape, Tensor};
use crate::maze::{step, Action, Cell, Maze, MazeError, MazeState, DEFAULT_BUDGET};
use crate::nn::{categorical_head, Dense, NnError, Parameters};
use crate::planner::Route;
use crate::rng::{SeedTree, Stream};
use crate::tree::{shape_histogram, ImaginationTree};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MazePlannerError {
    #[error(transparent)]
    Maze(#[from] MazeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("no leaf can be expanded")]
    NoExpandableLeaf,
    #[error("node {0} is terminal or does not exist")]
    BadExpansion(usize),
    #[error("invalid maze agent config: {0}")]
    Config(String),
    #[error("manager training produced a non-finite gradient at iteration {0}")]
    NonFinite(usize),
}

/// One real value per (row, column, action).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

/// Tabular controller, one per maze.
pub type QTable = ActionGrid;
/// Additive plan context; starts at zero every episode.
pub type HistoryTensor = ActionGrid;

impl ActionGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width * 4],
        }
    }

    /// Rebuild from row-major `(cell, action)` values, as given by
    /// [`as_slice`](Self::as_slice).
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self, MazePlannerError> {
        if values.len() != height * width * 4 {
            return Err(MazePlannerError::Config(format!(
                "{} values do not fill a {height}x{width} action grid",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn for_maze(maze: &Maze) -> Self {
        Self::zeros(maze.height(), maze.width())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn offset(&self, cell: Cell) -> usize {
        assert!(cell.row < self.height && cell.col < self.width, "{cell} out of bounds");
        (cell.row * self.width + cell.col) * 4
    }

    pub fn values(&self, cell: Cell) -> [f64; 4] {
        let o = self.offset(cell);
        [
            self.values[o],
            self.values[o + 1],
            self.values[o + 2],
            self.values[o + 3],
        ]
    }

    pub fn get(&self, cell: Cell, action: Action) -> f64 {
        self.values[self.offset(cell) + action.index()]
    }

    pub fn set(&mut self, cell: Cell, action: Action, value: f64) {
        let o = self.offset(cell);
        self.values[o + action.index()] = value;
    }

    pub fn add(&mut self, cell: Cell, action: Action, delta: f64) {
        let o = self.offset(cell);
        self.values[o + action.index()] += delta;
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Row-major `(cell, action)` values.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Q value given to moves that run into a wall. Such moves are not
/// available: they are never greedy and never imagined.
pub const BLOCKED: f64 = -1.0e6;

/// Whether `action` from `cell` is an available move under `q`.
pub fn is_available(q: &QTable, cell: Cell, action: Action) -> bool {
    q.get(cell, action) > BLOCKED / 2.0
}

/// Index of the largest value; the first wins ties.
fn argmax4(v: [f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn combined(q: &QTable, c: &HistoryTensor, cell: Cell) -> [f64; 4] {
    let (a, b) = (q.values(cell), c.values(cell));
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

/// Greedy action on `q + c`; ties go to up, down, left, right in that order.
pub fn act_policy(q: &QTable, c: &HistoryTensor, position: Cell) -> Action {
    Action::ALL[argmax4(combined(q, c, position))]
}

/// `max_a (q + c)` at `cell`.
pub fn state_value(q: &QTable, c: &HistoryTensor, cell: Cell) -> f64 {
    combined(q, c, cell).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImaginedTransition {
    pub state: MazeState,
    pub action: Action,
    pub reward: f64,
    pub next: MazeState,
}

/// Follow the greedy policy under the perfect model for `length` steps or
/// until the imagined episode ends.
pub fn imagine_rollout(
    maze: &Maze,
    from: &MazeState,
    q: &QTable,
    c: &HistoryTensor,
    length: u32,
) -> Result<Vec<ImaginedTransition>, MazePlannerError> {
    imagine_rollout_with(maze, from, q, c, length, None)
}

/// As [`imagine_rollout`], optionally forcing the first action.
pub fn imagine_rollout_with(
    maze: &Maze,
    from: &MazeState,
    q: &QTable,
    c: &HistoryTensor,
    length: u32,
    first: Option<Action>,
) -> Result<Vec<ImaginedTransition>, MazePlannerError> {
    let mut out = Vec::with_capacity(length as usize);
    let mut state = *from;
    for i in 0..length {
        if state.is_done() {
            break;
        }
        let action = match (i, first) {
            (0, Some(a)) => a,
            _ => act_policy(q, c, state.position),
        };
        let o = step(maze, &state, action)?;
        out.push(ImaginedTransition {
            state,
            action,
            reward: o.reward,
            next: o.state,
        });
        state = o.state;
    }
    Ok(out)
}

/// Fold imagined transitions into `c` with one-step backups applied from the
/// last transition to the first. Terminal states are worth zero.
pub fn context_update(c: &mut HistoryTensor, q: &QTable, transitions: &[ImaginedTransition], step_size: f64) {
    for t in transitions.iter().rev() {
        let next_value = if t.next.is_done() {
            0.0
        } else {
            state_value(q, c, t.next.position)
        };
        let current = q.get(t.state.position, t.action) + c.get(t.state.position, t.action);
        c.add(
            t.state.position,
            t.action,
            step_size * (t.reward + next_value - current),
        );
    }
}

/// Every distinct imagined move of an episode, keyed by (cell, action).
///
/// When the same move is imagined more than once, the copy made from the
/// fewest elapsed steps is kept, since that is the one the next real action
/// can still realise. Copies older than the current real step are replaced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeMemory {
    edges: Vec<ImaginedTransition>,
    index: HashMap<(Cell, Action), usize>,
}

impl EdgeMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Record `transitions`, imagined while the real episode stood at
    /// `real_steps` elapsed steps.
    pub fn record(&mut self, transitions: &[ImaginedTransition], real_steps: u32) {
        for t in transitions {
            match self.index.get(&(t.state.position, t.action)) {
                Some(&i) => {
                    let old = &mut self.edges[i];
                    if old.state.steps_used < real_steps || t.state.steps_used < old.state.steps_used {
                        *old = *t;
                    }
                }
                None => {
                    self.index.insert((t.state.position, t.action), self.edges.len());
                    self.edges.push(*t);
                }
            }
        }
    }

    /// Repeat one-step backups over every recorded move until `q + c` is
    /// consistent with all of them, or `max_sweeps` runs out.
    pub fn consolidate(&self, c: &mut HistoryTensor, q: &QTable, step_size: f64, max_sweeps: usize) {
        for _ in 0..max_sweeps {
            let before = c.clone();
            for t in self.edges.iter().rev() {
                context_update(c, q, std::slice::from_ref(t), step_size);
            }
            let change = before
                .as_slice()
                .iter()
                .zip(c.as_slice())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if change < 1e-12 {
                break;
            }
        }
    }
}

/// A node of the per-action search tree: an imagined state together with
/// the imagined path that led to it from the real state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub state: MazeState,
    pub parent: Option<usize>,
    /// Transitions from the real state to this node.
    pub path: Vec<ImaginedTransition>,
    tried: [bool; 4],
}

impl SearchNode {
    /// Every position visited from the real state down to this node.
    pub fn visited(&self) -> Vec<Cell> {
        let mut cells = vec![self.path.first().map_or(self.state.position, |t| t.state.position)];
        cells.extend(self.path.iter().map(|t| t.next.position));
        cells
    }

    /// The node's position already occurs earlier on its own path.
    pub fn closes_cycle(&self) -> bool {
        let v = self.visited();
        v[..v.len() - 1].contains(&self.state.position)
    }
}

/// Imagined rollouts made between two real actions. Node 0 is the real state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    nodes: Vec<SearchNode>,
}

impl SearchTree {
    pub fn new(root: MazeState) -> Self {
        Self {
            nodes: vec![SearchNode {
                state: root,
                parent: None,
                path: Vec::new(),
                tried: [false; 4],
            }],
        }
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Only the real state.
    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Untried first actions from `node`. Terminal nodes and nodes that
    /// closed a cycle (wall bump or revisit) offer nothing.
    pub fn candidate_actions(&self, node: usize) -> impl Iterator<Item = Action> + '_ {
        let n = &self.nodes[node];
        let open = !n.state.is_done() && !n.closes_cycle();
        Action::ALL.into_iter().filter(move |a| open && !n.tried[a.index()])
    }

    /// [`SearchTree::candidate_actions`] restricted to moves available
    /// under `q`.
    pub fn available_candidates<'a>(&'a self, q: &'a QTable, node: usize) -> impl Iterator<Item = Action> + 'a {
        let cell = self.nodes[node].state.position;
        self.candidate_actions(node).filter(move |&a| is_available(q, cell, a))
    }

    /// Roll out `length` steps from `parent` and add the end state as a new
    /// node. Returns its index.
    pub fn expand(
        &mut self,
        maze: &Maze,
        q: &QTable,
        c: &HistoryTensor,
        parent: usize,
        length: u32,
        first: Option<Action>,
    ) -> Result<usize, MazePlannerError> {
        let p = self.nodes.get(parent).ok_or(MazePlannerError::BadExpansion(parent))?;
        if p.state.is_done() {
            return Err(MazePlannerError::BadExpansion(parent));
        }
        let rollout = imagine_rollout_with(maze, &p.state, q, c, length, first)?;
        let first_action = rollout[0].action;
        let mut path = p.path.clone();
        path.extend_from_slice(&rollout);
        let state = rollout.last().expect("non-terminal start gives one step").next;
        self.nodes[parent].tried[first_action.index()] = true;
        self.nodes.push(SearchNode {
            state,
            parent: Some(parent),
            path,
            tried: [false; 4],
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn shape(&self) -> ImaginationTree {
        ImaginationTree::from_parents(self.nodes.iter().map(|n| n.parent).collect())
            .expect("children are created after their parents")
    }
}

/// Best-first choice: the (node, first action) pair with the highest
/// `(q + c)` value among [`SearchTree::candidate_actions`]; earliest node,
/// then action order, on ties.
pub fn fixed_manager(tree: &SearchTree, q: &QTable, c: &HistoryTensor) -> Result<(usize, Action), MazePlannerError> {
    let mut best: Option<(usize, Action, f64)> = None;
    for (i, node) in tree.nodes.iter().enumerate() {
        if node.state.is_done() {
            continue;
        }
        let v = combined(q, c, node.state.position);
        for a in tree.available_candidates(q, i) {
            if best.is_none_or(|(_, _, b)| v[a.index()] > b) {
                best = Some((i, a, v[a.index()]));
            }
        }
    }
    best.map(|(i, a, _)| (i, a)).ok_or(MazePlannerError::NoExpandableLeaf)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MazeAgentConfig {
    /// Imagination units available before each real action.
    pub imagination_budget: u32,
    /// Steps per imagination expansion; each expansion costs this many units.
    pub macro_len: u32,
    pub step_size: f64,
    /// Manager's penalty per expansion, in normalized reward units.
    pub resource_cost: f64,
    pub episode_budget: u32,
    /// After each expansion, re-apply backups over every move imagined so
    /// far this episode, up to this many sweeps. Zero keeps only the
    /// backups along the new rollout's path.
    pub consolidation_sweeps: usize,
}

impl Default for MazeAgentConfig {
    fn default() -> Self {
        Self {
            imagination_budget: 4,
            macro_len: 1,
            step_size: 1.0,
            resource_cost: 0.0,
            episode_budget: DEFAULT_BUDGET,
            consolidation_sweeps: 200,
        }
    }
}

impl MazeAgentConfig {
    pub fn validate(&self) -> Result<(), MazePlannerError> {
        if self.macro_len == 0 {
            return Err(MazePlannerError::Config("macro_len must be at least 1".into()));
        }
        if self.episode_budget == 0 {
            return Err(MazePlannerError::Config("episode_budget must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(MazePlannerError::Config("step_size must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// What the manager sees before each decision.
pub struct SlotView<'a> {
    pub maze: &'a Maze,
    pub q: &'a QTable,
    pub c: &'a HistoryTensor,
    pub tree: &'a SearchTree,
    /// Most recently created node (0 before any imagination).
    pub last: usize,
    pub units_left: u32,
    pub config: &'a MazeAgentConfig,
    /// Real actions taken so far.
    pub real_step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    Act,
    Expand { parent: usize, first: Option<Action> },
}

/// Something that decides, between real actions, whether and where to
/// imagine.
pub trait RoutePolicy {
    fn choose(&mut self, view: &SlotView<'_>) -> Result<Choice, MazePlannerError>;
    /// Normalized reward of the real step that just happened.
    fn observe(&mut self, _reward: f64) {}
}

/// Imagine from the real state until the budget is spent.
pub struct OneStepPolicy;

impl RoutePolicy for OneStepPolicy {
    fn choose(&mut self, _: &SlotView<'_>) -> Result<Choice, MazePlannerError> {
        Ok(Choice::Expand { parent: 0, first: None })
    }
}

/// Extend the last imagined rollout until the budget is spent or it ends.
pub struct NStepPolicy;

impl RoutePolicy for NStepPolicy {
    fn choose(&mut self, view: &SlotView<'_>) -> Result<Choice, MazePlannerError> {
        if view.tree.nodes()[view.last].state.is_done() {
            Ok(Choice::Act)
        } else {
            Ok(Choice::Expand {
                parent: view.last,
                first: None,
            })
        }
    }
}

/// Best-first expansion by [`fixed_manager`]; acts when nothing is left to
/// expand.
pub struct FixedPolicy;

impl RoutePolicy for FixedPolicy {
    fn choose(&mut self, view: &SlotView<'_>) -> Result<Choice, MazePlannerError> {
        match fixed_manager(view.tree, view.q, view.c) {
            Ok((parent, a)) => Ok(Choice::Expand { parent, first: Some(a) }),
            Err(MazePlannerError::NoExpandableLeaf) => Ok(Choice::Act),
            Err(e) => Err(e),
        }
    }
}

/// One real action and the imagination that preceded it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub real_state: MazeState,
    pub search: SearchTree,
    pub action: Action,
    pub reward: f64,
    pub units_used: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeEpisode {
    pub goal: Cell,
    pub slots: Vec<SlotRecord>,
    pub total_return: f64,
    pub budget: u32,
    pub final_state: MazeState,
}

impl MazeEpisode {
    pub fn normalized_return(&self) -> f64 {
        self.total_return / f64::from(self.budget)
    }

    pub fn imagination_units(&self) -> u32 {
        self.slots.iter().map(|s| s.units_used).sum()
    }

    /// Real positions from start to finish.
    pub fn real_path(&self) -> Vec<Cell> {
        let mut p: Vec<Cell> = self.slots.iter().map(|s| s.real_state.position).collect();
        p.push(self.final_state.position);
        p
    }

    pub fn trees(&self) -> Vec<ImaginationTree> {
        self.slots.iter().map(|s| s.search.shape()).collect()
    }

    pub fn reached_goal(&self) -> bool {
        self.final_state.at_goal()
    }
}

/// Play one episode against the live `goal`.
pub fn play(
    maze: &Maze,
    q: &QTable,
    goal: Cell,
    config: &MazeAgentConfig,
    policy: &mut impl RoutePolicy,
) -> Result<MazeEpisode, MazePlannerError> {
    config.validate()?;
    let mut state = maze.initial_state(goal, config.episode_budget)?;
    let mut c = HistoryTensor::for_maze(maze);
    let mut memory = EdgeMemory::new();
    let mut slots = Vec::new();
    let mut total = 0.0;
    while !state.is_done() {
        let mut tree = SearchTree::new(state);
        let mut last = 0;
        let mut units_left = config.imagination_budget;
        while units_left >= config.macro_len {
            let view = SlotView {
                maze,
                q,
                c: &c,
                tree: &tree,
                last,
                units_left,
                config,
                real_step: slots.len(),
            };
            match policy.choose(&view)? {
                Choice::Act => break,
                Choice::Expand { parent, first } => {
                    let node = tree.expand(maze, q, &c, parent, config.macro_len, first)?;
                    context_update(&mut c, q, &tree.nodes[node].path, config.step_size);
                    if config.consolidation_sweeps > 0 {
                        memory.record(&tree.nodes[node].path, state.steps_used);
                        memory.consolidate(&mut c, q, config.step_size, config.consolidation_sweeps);
                    }
                    units_left -= config.macro_len;
                    last = node;
                }
            }
        }
        let action = act_policy(q, &c, state.position);
        let out = step(maze, &state, action)?;
        total += out.reward;
        policy.observe(out.reward / f64::from(config.episode_budget));
        slots.push(SlotRecord {
            real_state: state,
            search: tree,
            action,
            reward: out.reward,
            units_used: config.imagination_budget - units_left,
        });
        state = out.state;
    }
    Ok(MazeEpisode {
        goal,
        slots,
        total_return: total,
        budget: config.episode_budget,
        final_state: state,
    })
}

/// Count imagination trees by shape over every action slot of `episodes`.
pub fn tree_histogram<'a>(episodes: impl IntoIterator<Item = &'a MazeEpisode>) -> Vec<(String, usize)> {
    let trees: Vec<ImaginationTree> = episodes.into_iter().flat_map(|e| e.trees()).collect();
    shape_histogram(&trees)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QLearningConfig {
    pub episodes: usize,
    pub epsilon: f64,
    pub step_size: f64,
    pub budget: u32,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            episodes: 20_000,
            epsilon: 0.2,
            step_size: 0.1,
            budget: DEFAULT_BUDGET,
        }
    }
}

/// Tabular Q-learning over positions only.
///
/// The controller cannot see which candidate is live, so it is trained
/// toward the aliased optimum: stepping onto any candidate in `goals` ends
/// the episode and pays the terminal bonus weighted by the prior chance
/// `1 / goals.len()` that this candidate is the live one. The greedy policy
/// heads for the closest candidate. Episodes start from a random open cell,
/// candidates included (exploring starts), so every reachable cell gets
/// values. Moves into walls are marked [`BLOCKED`].
pub fn q_learning(
    maze: &Maze,
    goals: &[Cell],
    config: &QLearningConfig,
    rng: &mut impl Rng,
) -> Result<QTable, MazePlannerError> {
    if goals.is_empty() {
        return Err(MazeError::NoGoals.into());
    }
    let mut q = QTable::for_maze(maze);
    for cell in maze.cells() {
        for a in Action::ALL {
            if maze.neighbour(cell, a) == cell {
                q.set(cell, a, BLOCKED);
            }
        }
    }
    let starts: Vec<Cell> = maze.cells().filter(|c| !maze.is_wall(*c)).collect();
    let prior = 1.0 / goals.len() as f64;
    let zero = HistoryTensor::for_maze(maze);
    for _ in 0..config.episodes {
        let Some(&start) = starts.choose(rng) else { break };
        let (mut pos, mut used) = (start, 0u32);
        while used < config.budget {
            let open: Vec<Action> = Action::ALL.into_iter().filter(|&a| is_available(&q, pos, a)).collect();
            let action = if rng.random::<f64>() < config.epsilon {
                match open.choose(rng) {
                    Some(a) => *a,
                    None => break,
                }
            } else {
                act_policy(&q, &zero, pos)
            };
            let next = maze.neighbour(pos, action);
            used += 1;
            let hit = goals.contains(&next);
            let target = if hit {
                -1.0 + prior * f64::from(config.budget - used)
            } else if used >= config.budget {
                -1.0
            } else {
                -1.0 + state_value(&q, &zero, next)
            };
            let old = q.get(pos, action);
            q.set(pos, action, old + config.step_size * (target - old));
            if hit {
                break;
            }
            pos = next;
        }
    }
    Ok(q)
}

/// A maze, its pre-trained controller and the goals it is played with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeTask {
    pub maze: Maze,
    pub q: QTable,
    pub train_goals: Vec<Cell>,
    pub eval_goals: Vec<Cell>,
}

impl MazeTask {
    /// Pre-train Q on `train_goals`; evaluation uses every candidate goal.
    pub fn prepare(
        maze: Maze,
        train_goals: Vec<Cell>,
        config: &QLearningConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, MazePlannerError> {
        let q = q_learning(&maze, &train_goals, config, rng)?;
        Ok(Self {
            eval_goals: maze.candidate_goals().to_vec(),
            maze,
            q,
            train_goals,
        })
    }

    /// Every candidate goal used for training and evaluation.
    pub fn all_goals(maze: Maze, config: &QLearningConfig, rng: &mut impl Rng) -> Result<Self, MazePlannerError> {
        let goals = maze.candidate_goals().to_vec();
        Self::prepare(maze, goals, config, rng)
    }
}

/// Pre-train Q for each maze, seeding maze `i` from the Q-learning stream
/// at index `i`.
pub fn prepare_tasks(
    mazes: Vec<Maze>,
    config: &QLearningConfig,
    seeds: &SeedTree,
) -> Result<Vec<MazeTask>, MazePlannerError> {
    mazes
        .into_iter()
        .enumerate()
        .map(|(i, m)| MazeTask::all_goals(m, config, &mut seeds.rng(Stream::QLearning, i as u64)))
        .collect()
}

/// Convolutional manager: two 3×3 convolutions with zero padding, mean
/// pooling and a linear head over the three routes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerNet {
    pub conv1: Dense,
    pub conv2: Dense,
    pub head: Dense,
}

/// Input planes per cell: q (4), c (4), wall, agent, last imagined
/// position, remaining imagination units.
pub const MANAGER_CHANNELS: usize = 12;
const HIDDEN_CHANNELS: usize = 16;
const KERNEL: usize = 9;

impl ManagerNet {
    /// Random convolutions, zero head (uniform initial routes).
    pub fn new(rng: &mut impl Rng) -> Self {
        let dense = |rng: &mut dyn rand::RngCore, i: usize, o: usize| {
            let bound = 1.0 / (i as f64).sqrt();
            let w = (0..i * o).map(|_| rng.random_range(-bound..bound)).collect();
            Dense {
                weight: Tensor::new(vec![i, o], w).expect("shape"),
                bias: Tensor::zeros(&[1, o]),
            }
        };
        Self {
            conv1: dense(rng, KERNEL * MANAGER_CHANNELS, HIDDEN_CHANNELS),
            conv2: dense(rng, KERNEL * HIDDEN_CHANNELS, HIDDEN_CHANNELS),
            head: Dense {
                weight: Tensor::zeros(&[HIDDEN_CHANNELS, 3]),
                bias: Tensor::zeros(&[1, 3]),
            },
        }
    }

    pub fn seeded(seeds: &SeedTree) -> Self {
        Self::new(&mut seeds.rng(Stream::Init, 1))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundManagerNet {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let ids: Vec<NodeId> = self.tensors().into_iter().map(&mut put).collect();
        BoundManagerNet { ids }
    }
}

impl Parameters for ManagerNet {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }
}

pub struct BoundManagerNet {
    ids: Vec<NodeId>,
}

/// For each cell, its 3×3 neighbourhood in row-major order; `None` outside.
fn neighbourhoods(height: usize, width: usize) -> Vec<[Option<usize>; KERNEL]> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height as isize {
        for col in 0..width as isize {
            let mut n = [None; KERNEL];
            for (k, slot) in n.iter_mut().enumerate() {
                let (rr, cc) = (r + k as isize / 3 - 1, col + k as isize % 3 - 1);
                if rr >= 0 && cc >= 0 && rr < height as isize && cc < width as isize {
                    *slot = Some(rr as usize * width + cc as usize);
                }
            }
            out.push(n);
        }
    }
    out
}

impl BoundManagerNet {
    pub fn ids(&self) -> Vec<NodeId> {
        self.ids.clone()
    }

    /// Route logits `[1, 3]` from `[H*W, MANAGER_CHANNELS]` input planes.
    pub fn logits(
        &self,
        tape: &mut Tape,
        planes: &Tensor,
        height: usize,
        width: usize,
    ) -> Result<NodeId, MazePlannerError> {
        let cells = height * width;
        let nb = neighbourhoods(height, width);
        let x = planes.data();
        let mut cols = vec![0.0; cells * KERNEL * MANAGER_CHANNELS];
        for (p, n) in nb.iter().enumerate() {
            for (k, src) in n.iter().enumerate() {
                if let Some(s) = src {
                    let dst = p * KERNEL * MANAGER_CHANNELS + k * MANAGER_CHANNELS;
                    cols[dst..dst + MANAGER_CHANNELS]
                        .copy_from_slice(&x[s * MANAGER_CHANNELS..(s + 1) * MANAGER_CHANNELS]);
                }
            }
        }
        let cols = tape.constant(Tensor::new(vec![cells, KERNEL * MANAGER_CHANNELS], cols)?);
        let [w1, b1, w2, b2, w3, b3] = self.ids[..] else {
            unreachable!("six manager tensors")
        };
        let h = tape.matmul(cols, w1)?;
        let h = tape.add(h, b1)?;
        let h1 = tape.relu(h)?;
        let shifted = (0..KERNEL)
            .map(|k| tape.gather_rows(h1, nb.iter().map(|n| n[k]).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        let cols2 = tape.concat(&shifted)?;
        let h = tape.matmul(cols2, w2)?;
        let h = tape.add(h, b2)?;
        let h2 = tape.relu(h)?;
        let pool = tape.constant(Tensor::filled(&[1, cells], 1.0 / cells as f64));
        let pooled = tape.matmul(pool, h2)?;
        let out = tape.matmul(pooled, w3)?;
        Ok(tape.add(out, b3)?)
    }
}

/// Input planes for the manager, `[H*W, MANAGER_CHANNELS]`.
pub fn manager_planes(view: &SlotView<'_>) -> Tensor {
    let m = view.maze;
    let scale = 1.0 / f64::from(view.config.episode_budget);
    let agent = view.tree.nodes()[0].state.position;
    let last = view.tree.nodes()[view.last].state.position;
    let units = if view.config.imagination_budget == 0 {
        0.0
    } else {
        f64::from(view.units_left) / f64::from(view.config.imagination_budget)
    };
    let mut data = Vec::with_capacity(m.height() * m.width() * MANAGER_CHANNELS);
    for cell in m.cells() {
        data.extend(
            view.q
                .values(cell)
                .map(|v| if v > BLOCKED / 2.0 { v * scale } else { -1.0 }),
        );
        data.extend(view.c.values(cell).map(|v| v * scale));
        data.push(if m.is_wall(cell) { 1.0 } else { 0.0 });
        data.push(if cell == agent { 1.0 } else { 0.0 });
        data.push(if cell == last { 1.0 } else { 0.0 });
        data.push(units);
    }
    Tensor::new(vec![m.height() * m.width(), MANAGER_CHANNELS], data).expect("plane shape")
}

/// Sample (or, when greedy, take the most likely) route.
pub fn learned_manager<R: Rng>(
    tape: &mut Tape,
    net: &BoundManagerNet,
    view: &SlotView<'_>,
    greedy: bool,
    rng: &mut R,
) -> Result<ManagerDecision, MazePlannerError> {
    let planes = manager_planes(view);
    let logits = net.logits(tape, &planes, view.maze.height(), view.maze.width())?;
    let can_extend = !view.tree.nodes()[view.last].state.is_done();
    let mask = [true, true, can_extend];
    let pick = categorical_head(tape, logits, Some(&mask), rng)?;
    let index = if greedy { argmax_first(&pick.probs) } else { pick.index };
    let log_prob = if index == pick.index {
        pick.log_prob
    } else {
        let lp = tape.log_softmax(logits)?;
        let s = tape.slice(lp, index, index + 1)?;
        tape.sum(s)?
    };
    Ok(ManagerDecision {
        route: Route::from_index(index).expect("three routes"),
        log_prob,
        entropy: pick.entropy,
        probs: pick.probs,
    })
}

fn argmax_first(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub struct ManagerDecision {
    pub route: Route,
    pub log_prob: NodeId,
    pub entropy: NodeId,
    pub probs: Vec<f64>,
}

/// A recorded manager decision for REINFORCE.
#[derive(Clone, Debug)]
pub struct DecisionRecord {
    pub log_prob: NodeId,
    pub entropy: NodeId,
    pub reward: f64,
    /// `(real step, expansions so far)`, used to key the baseline.
    pub slot: (usize, usize),
}

/// The learned manager playing one episode on its own tape.
pub struct LearnedPolicy<'t, R> {
    pub tape: &'t mut Tape,
    pub net: BoundManagerNet,
    pub greedy: bool,
    pub rng: R,
    pub decisions: Vec<DecisionRecord>,
}

impl<R: Rng> RoutePolicy for LearnedPolicy<'_, R> {
    fn choose(&mut self, view: &SlotView<'_>) -> Result<Choice, MazePlannerError> {
        let d = learned_manager(self.tape, &self.net, view, self.greedy, &mut self.rng)?;
        let reward = if d.route.is_imagination() {
            -view.config.resource_cost
        } else {
            0.0
        };
        self.decisions.push(DecisionRecord {
            log_prob: d.log_prob,
            entropy: d.entropy,
            reward,
            slot: (view.real_step, view.tree.len() - 1),
        });
        Ok(match d.route {
            Route::Act => Choice::Act,
            Route::ImagineFromReal => Choice::Expand { parent: 0, first: None },
            Route::ImagineFromLast => Choice::Expand {
                parent: view.last,
                first: None,
            },
        })
    }

    fn observe(&mut self, reward: f64) {
        if let Some(d) = self.decisions.last_mut() {
            d.reward += reward;
        }
    }
}

/// Which manager drives imagination.
#[derive(Clone, Copy, Debug)]
pub enum MazeManager<'a> {
    OneStep,
    NStep,
    Fixed,
    Learned { net: &'a ManagerNet, greedy: bool },
}

/// Play one episode with `manager`. `rng` only matters for a sampling
/// learned manager.
pub fn run_maze_episode<R: Rng>(
    task: &MazeTask,
    goal: Cell,
    config: &MazeAgentConfig,
    manager: MazeManager<'_>,
    rng: R,
) -> Result<MazeEpisode, MazePlannerError> {
    let (maze, q) = (&task.maze, &task.q);
    match manager {
        MazeManager::OneStep => play(maze, q, goal, config, &mut OneStepPolicy),
        MazeManager::NStep => play(maze, q, goal, config, &mut NStepPolicy),
        MazeManager::Fixed => play(maze, q, goal, config, &mut FixedPolicy),
        MazeManager::Learned { net, greedy } => {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, false);
            let mut p = LearnedPolicy {
                tape: &mut tape,
                net: bound,
                greedy,
                rng,
                decisions: Vec::new(),
            };
            play(maze, q, goal, config, &mut p)
        }
    }
}

/// Normalized return of one evaluation episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalScore {
    pub task: usize,
    pub goal: Cell,
    pub normalized_return: f64,
    pub optimum: f64,
    pub imagination_units: u32,
}

/// Play every `(task, eval goal)` pair once.
pub fn evaluate_manager(
    tasks: &[MazeTask],
    config: &MazeAgentConfig,
    manager: MazeManager<'_>,
    seeds: &SeedTree,
) -> Result<(Vec<GoalScore>, Vec<MazeEpisode>), MazePlannerError> {
    let mut scores = Vec::new();
    let mut episodes = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        for (g, &goal) in task.eval_goals.iter().enumerate() {
            let rng = seeds.rng(Stream::Evaluation, (t * 64 + g) as u64);
            let ep = run_maze_episode(task, goal, config, manager, rng)?;
            scores.push(GoalScore {
                task: t,
                goal,
                normalized_return: ep.normalized_return(),
                optimum: crate::maze::optimal_return(&task.maze, goal, config.episode_budget)?,
                imagination_units: ep.imagination_units(),
            });
            episodes.push(ep);
        }
    }
    Ok((scores, episodes))
}

pub fn mean_return(scores: &[GoalScore]) -> f64 {
    scores.iter().map(|s| s.normalized_return).sum::<f64>() / scores.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    /// Weight of the old value in the moving-average baseline.
    pub baseline_decay: f64,
    pub clip_norm: f64,
}

impl Default for ManagerTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch: 32,
            lr: 1e-2,
            entropy_coef: 0.05,
            baseline_decay: 0.9,
            clip_norm: 10.0,
        }
    }
}

/// Per-iteration training record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerIteration {
    pub iteration: usize,
    pub mean_return: f64,
    pub mean_units: f64,
    pub grad_norm: f64,
}

/// A trained manager with the optimizer state it finished with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedManager {
    pub net: ManagerNet,
    pub optimizer: AdamState,
    pub iterations: usize,
}

/// Train a shared manager by REINFORCE over `tasks`. Each episode draws a
/// task and one of its training goals. Advantages subtract a moving-average
/// baseline kept per (task, real step, expansion count).
pub fn train_manager(
    tasks: &[MazeTask],
    agent: &MazeAgentConfig,
    config: &ManagerTrainConfig,
    seeds: &SeedTree,
    mut log: impl FnMut(&ManagerIteration),
) -> Result<TrainedManager, MazePlannerError> {
    agent.validate()?;
    let mut net = ManagerNet::seeded(seeds);
    let mut opt = AdamState::new(net.tensors());
    let adam = AdamConfig::with_lr(config.lr);
    let mut baseline: HashMap<(usize, usize, usize), f64> = HashMap::new();
    for it in 0..config.iterations {
        let mut grads: Vec<Tensor> = net.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut updates = Vec::new();
        let (mut ret, mut units) = (0.0, 0.0);
        for e in 0..config.batch {
            let index = (it * config.batch + e) as u64;
            let mut env = seeds.rng(Stream::Env, index);
            let t = env.random_range(0..tasks.len());
            let task = &tasks[t];
            let goal = *task.train_goals.choose(&mut env).expect("task has goals");
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let ids = bound.ids();
            let mut policy = LearnedPolicy {
                tape: &mut tape,
                net: bound,
                greedy: false,
                rng: seeds.rng(Stream::Manager, index),
                decisions: Vec::new(),
            };
            let ep = play(&task.maze, &task.q, goal, agent, &mut policy)?;
            let decisions = policy.decisions;
            ret += ep.normalized_return();
            units += f64::from(ep.imagination_units());
            if decisions.is_empty() {
                continue;
            }
            let mut g = 0.0;
            let mut returns = vec![0.0; decisions.len()];
            for (i, d) in decisions.iter().enumerate().rev() {
                g += d.reward;
                returns[i] = g;
            }
            let mut objective = tape.constant(Tensor::scalar(0.0));
            for (d, &g) in decisions.iter().zip(&returns) {
                let key = (t, d.slot.0, d.slot.1);
                let b = baseline.get(&key).copied().unwrap_or(0.0);
                let term = tape.scale(d.log_prob, -(g - b))?;
                objective = tape.add(objective, term)?;
                let bonus = tape.scale(d.entropy, -config.entropy_coef)?;
                objective = tape.add(objective, bonus)?;
                updates.push((key, g));
            }
            let gr = tape.backward(objective)?.collect(&ids);
            for (acc, g) in grads.iter_mut().zip(&gr) {
                acc.add_assign(g);
            }
        }
        for (key, g) in updates {
            let b = baseline.entry(key).or_insert(g);
            *b = config.baseline_decay * *b + (1.0 - config.baseline_decay) * g;
        }
        for g in &mut grads {
            g.scale_in_place(1.0 / config.batch as f64);
        }
        let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(MazePlannerError::NonFinite(it));
        }
        opt.update(&mut net.tensors_mut(), &grads, &adam)?;
        log(&ManagerIteration {
            iteration: it,
            mean_return: ret / config.batch as f64,
            mean_units: units / config.batch as f64,
            grad_norm,
        });
    }
    Ok(TrainedManager {
        net,
        optimizer: opt,
        iterations: config.iterations,
    })
}
