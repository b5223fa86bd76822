//! The subcommands, as library calls.
//!
//! Each command computes every artifact in memory and only then writes
//! them, one atomic rename per file, so a failing run leaves nothing
//! behind.

use std::path::{Path, PathBuf};

use ibp::diffcore::AdamState;
use ibp::maze_planner::{
    evaluate_manager, train_manager, tree_histogram, ManagerNet, MazeEpisode, MazeManager, MazeTask, TrainedManager,
};
use ibp::nn::Parameters;
use ibp::planner::{run_episode, tree_from_trace, AgentParams, EpisodeRngs, EpisodeTrace};
use ibp::rng::Stream;
use ibp::trainer::{scene_set, Trainer};
use ibp::tree::shape_histogram;

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::{RunConfig, StrategyKind, TaskKind};
use crate::metrics::{
    summarize, to_csv, EvalRow, SweepRow, TrainRow, TreeStatsRow, EVAL_HEADER, SWEEP_HEADER, TRAIN_HEADER,
    TREE_STATS_HEADER,
};
use crate::render::{maze_svg, spaceship_svg};
use crate::HarnessError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ibp";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const TREE_STATS_FILE: &str = "tree_stats.csv";

/// Files to be written, in order.
#[derive(Default)]
pub struct Artifacts(pub Vec<(PathBuf, Vec<u8>)>);

impl Artifacts {
    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.0.push((path, bytes));
    }

    pub fn commit(self) -> Result<Vec<PathBuf>, HarnessError> {
        let mut written = Vec::new();
        for (path, bytes) in self.0 {
            write_atomic(&path, &bytes).map_err(HarnessError::io(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// A trained agent of either task.
#[allow(clippy::large_enum_variant)]
pub enum Agent {
    Spaceship(Box<Trainer>),
    Maze {
        tasks: Vec<MazeTask>,
        manager: Option<TrainedManager>,
    },
}

impl Agent {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        match self {
            Agent::Spaceship(t) => Checkpoint::from_trainer(t, cfg.fingerprint()),
            Agent::Maze { tasks, manager } => Checkpoint::from_maze(tasks, manager.as_ref(), cfg.fingerprint()),
        }
    }
}

/// Train from scratch, reporting each iteration to `log`.
pub fn train_agent(cfg: &RunConfig, mut log: impl FnMut(&TrainRow)) -> Result<(Agent, Vec<TrainRow>), HarnessError> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let mut rows = Vec::new();
    match cfg.task {
        TaskKind::Spaceship => {
            let params = AgentParams::seeded(cfg.agent.clone(), &seeds);
            let mut trainer = Trainer::new(cfg.train.clone(), cfg.spec(), params, seeds)?;
            trainer.run(|m| {
                let row = TrainRow {
                    iteration: m.iteration,
                    task_loss: Some(m.task_loss),
                    model_loss: Some(m.model_loss),
                    resource_cost: Some(m.resource_cost),
                    manager_return: m.manager_return,
                    imaginations: m.imaginations,
                    route_entropy: Some(m.route_entropy),
                    manager_grad_norm: m.manager_grad_norm,
                    controller_grad_norm: Some(m.controller_grad_norm),
                    lr_model: Some(m.lr_model),
                    lr_controller: Some(m.lr_controller),
                    lr_manager: m.lr_manager,
                };
                log(&row);
                rows.push(row);
            })?;
            Ok((Agent::Spaceship(Box::new(trainer)), rows))
        }
        TaskKind::Maze => {
            let tasks = cfg.maze_tasks()?;
            let manager = if cfg.strategy == StrategyKind::Tree {
                let agent = cfg.maze_agent();
                let m = train_manager(&tasks, &agent, &cfg.maze.manager, &seeds, |m| {
                    let row = TrainRow {
                        iteration: m.iteration as u64,
                        task_loss: None,
                        model_loss: None,
                        resource_cost: Some(m.mean_units / f64::from(agent.macro_len) * agent.resource_cost),
                        manager_return: m.mean_return,
                        imaginations: m.mean_units,
                        route_entropy: None,
                        manager_grad_norm: m.grad_norm,
                        controller_grad_norm: None,
                        lr_model: None,
                        lr_controller: None,
                        lr_manager: cfg.maze.manager.lr,
                    };
                    log(&row);
                    rows.push(row);
                })?;
                Some(m)
            } else {
                None
            };
            Ok((Agent::Maze { tasks, manager }, rows))
        }
    }
}

/// Load a checkpoint and rebuild the agent it describes under `cfg`.
pub fn load_agent(cfg: &RunConfig, path: &Path, force: bool) -> Result<Agent, HarnessError> {
    cfg.validate()?;
    if !path.exists() {
        return Err(HarnessError::MissingFile { path: path.into() });
    }
    let ck = Checkpoint::load(path).map_err(|source| HarnessError::Checkpoint {
        path: path.into(),
        source,
    })?;
    let expected = cfg.fingerprint();
    if ck.fingerprint != expected && !force {
        return Err(HarnessError::FingerprintMismatch {
            path: path.into(),
            expected: expected.to_string(),
            found: ck.fingerprint.to_string(),
        });
    }
    let wrap = |source| HarnessError::Checkpoint {
        path: path.into(),
        source,
    };
    match cfg.task {
        TaskKind::Spaceship => {
            let seeds = cfg.seeds();
            let params = AgentParams::seeded(cfg.agent.clone(), &seeds);
            let mut trainer = Trainer::new(cfg.train.clone(), cfg.spec(), params, seeds)?;
            ck.restore_trainer(&mut trainer).map_err(wrap)?;
            Ok(Agent::Spaceship(Box::new(trainer)))
        }
        TaskKind::Maze => {
            let mut tasks = cfg.maze_tasks()?;
            ck.restore_q_tables(&mut tasks).map_err(wrap)?;
            let manager = if cfg.strategy == StrategyKind::Tree {
                let net = ck.maze_manager(ManagerNet::seeded(&cfg.seeds())).map_err(wrap)?;
                let mut optimizer = AdamState::new(net.tensors());
                ck.restore_optimizer("opt.maze_manager", &mut optimizer).map_err(wrap)?;
                Some(TrainedManager {
                    net,
                    optimizer,
                    iterations: ck.iteration as usize,
                })
            } else {
                None
            };
            Ok(Agent::Maze { tasks, manager })
        }
    }
}

/// Played evaluation episodes.
pub enum Episodes {
    Spaceship(Vec<EpisodeTrace>),
    Maze(Vec<(usize, MazeEpisode)>),
}

/// Fixed-seed evaluation: the first `eval.episodes` scenes of the
/// evaluation stream, or every (maze, goal) pair.
pub fn play_eval(cfg: &RunConfig, agent: &Agent) -> Result<(Vec<EvalRow>, Episodes), HarnessError> {
    let seeds = cfg.seeds();
    match agent {
        Agent::Spaceship(trainer) => {
            let spec = cfg.spec();
            let scenes = scene_set(&seeds, Stream::Evaluation, cfg.eval.episodes, &spec);
            let eval_seeds = seeds.child(2);
            let mut rows = Vec::new();
            let mut traces = Vec::new();
            for (i, scene) in scenes.iter().enumerate() {
                let mut rngs = EpisodeRngs::for_episode(&eval_seeds, i as u64);
                let t = run_episode(&trainer.params, scene, &spec, &mut rngs)?;
                rows.push(EvalRow {
                    task: TaskKind::Spaceship.name(),
                    episode: i,
                    maze: None,
                    goal_row: None,
                    goal_col: None,
                    task_loss: Some(t.task_loss()),
                    fuel_cost: Some(t.fuel_cost),
                    final_distance: Some(t.final_distance),
                    normalized_return: None,
                    optimum: None,
                    resource_cost: t.resource_cost,
                    imaginations: t.imagination_steps() as f64,
                });
                traces.push(t);
            }
            Ok((rows, Episodes::Spaceship(traces)))
        }
        Agent::Maze { tasks, manager } => {
            let agent_cfg = cfg.maze_agent();
            let m = match (cfg.strategy, manager) {
                (StrategyKind::Onestep, _) => MazeManager::OneStep,
                (StrategyKind::Nstep, _) => MazeManager::NStep,
                (StrategyKind::Fixed, _) => MazeManager::Fixed,
                (StrategyKind::Tree, Some(m)) => MazeManager::Learned {
                    net: &m.net,
                    greedy: true,
                },
                (StrategyKind::Tree, None) => {
                    return Err(HarnessError::Config("no learned manager to evaluate".into()))
                }
            };
            let (scores, episodes) = evaluate_manager(tasks, &agent_cfg, m, &seeds)?;
            let rows = scores
                .iter()
                .zip(&episodes)
                .enumerate()
                .map(|(i, (s, ep))| {
                    let expansions: usize = ep.trees().iter().map(|t| t.len() - 1).sum();
                    EvalRow {
                        task: TaskKind::Maze.name(),
                        episode: i,
                        maze: Some(s.task),
                        goal_row: Some(s.goal.row),
                        goal_col: Some(s.goal.col),
                        task_loss: None,
                        fuel_cost: None,
                        final_distance: None,
                        normalized_return: Some(s.normalized_return),
                        optimum: Some(s.optimum),
                        resource_cost: expansions as f64 * agent_cfg.resource_cost,
                        imaginations: f64::from(s.imagination_units),
                    }
                })
                .collect();
            let indexed = scores.iter().map(|s| s.task).zip(episodes).collect();
            Ok((rows, Episodes::Maze(indexed)))
        }
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

/// `train`: metrics CSV and a checkpoint.
pub fn train(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    log: impl FnMut(&TrainRow),
) -> Result<Vec<PathBuf>, HarnessError> {
    let (agent, rows) = train_agent(cfg, log)?;
    let mut a = Artifacts::default();
    a.add(out_file(cfg, METRICS_FILE), to_csv(TRAIN_HEADER, &rows)?);
    let ck_path = checkpoint.map_or_else(|| out_file(cfg, CHECKPOINT_FILE), Path::to_path_buf);
    a.add(ck_path, agent.checkpoint(cfg).to_bytes());
    a.commit()
}

fn require<'a>(checkpoint: Option<&'a Path>, cmd: &'static str) -> Result<&'a Path, HarnessError> {
    checkpoint.ok_or(HarnessError::NoCheckpoint(cmd))
}

/// `eval`: one CSV row per episode.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    force: bool,
) -> Result<(Vec<EvalRow>, Vec<PathBuf>), HarnessError> {
    let agent = load_agent(cfg, require(checkpoint, "eval")?, force)?;
    let (rows, _) = play_eval(cfg, &agent)?;
    let mut a = Artifacts::default();
    a.add(out_file(cfg, EVAL_FILE), to_csv(EVAL_HEADER, &rows)?);
    Ok((rows, a.commit()?))
}

/// The sweep's cells in row order: tau, then imagination limit, then seed.
pub fn sweep_cells(cfg: &RunConfig) -> Vec<RunConfig> {
    let taus = if cfg.sweep.tau.is_empty() {
        vec![None]
    } else {
        cfg.sweep.tau.iter().map(|t| Some(*t)).collect()
    };
    let imags = if cfg.sweep.max_imaginations.is_empty() {
        vec![None]
    } else {
        cfg.sweep.max_imaginations.iter().map(|n| Some(*n)).collect()
    };
    let seeds = if cfg.sweep.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.sweep.seeds.clone()
    };
    let mut cells = Vec::new();
    for tau in &taus {
        for imag in &imags {
            for &seed in &seeds {
                let mut c = cfg.clone();
                c.apply(&crate::config::Overrides {
                    seed: Some(seed),
                    tau: *tau,
                    max_imaginations: *imag,
                    ..Default::default()
                });
                c.out = cfg.out.join("cells").join(format!("{:03}", cells.len()));
                c.sweep = Default::default();
                cells.push(c);
            }
        }
    }
    cells
}

/// `sweep`: train and evaluate every cell; one row per cell. Each cell's
/// own metrics, checkpoint and evaluation go to `out/cells/NNN/`.
pub fn sweep(
    cfg: &RunConfig,
    mut progress: impl FnMut(usize, usize, &SweepRow),
) -> Result<(Vec<SweepRow>, Vec<PathBuf>), HarnessError> {
    cfg.validate()?;
    let cells = sweep_cells(cfg);
    let mut a = Artifacts::default();
    let mut rows = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let (agent, train_rows) = train_agent(c, |_| {})?;
        let (eval_rows, _) = play_eval(c, &agent)?;
        let (task_loss, ret, imag, resource) = summarize(&eval_rows);
        let tau = match c.cost {
            ibp::planner::ResourceSchedule::Fixed { tau } => tau,
            ibp::planner::ResourceSchedule::Ramp { per_execution } => per_execution,
        };
        let row = SweepRow {
            cell: i,
            task: c.task.name(),
            strategy: c.strategy.name(),
            seed: c.seed,
            tau,
            max_imaginations: c.max_imaginations(),
            max_actions: c.max_actions(),
            episodes: eval_rows.len(),
            mean_task_loss: task_loss,
            mean_return: ret,
            mean_imaginations: imag,
            mean_resource_cost: resource,
        };
        progress(i, cells.len(), &row);
        rows.push(row);
        a.add(out_file(c, METRICS_FILE), to_csv(TRAIN_HEADER, &train_rows)?);
        a.add(out_file(c, CHECKPOINT_FILE), agent.checkpoint(c).to_bytes());
        a.add(out_file(c, EVAL_FILE), to_csv(EVAL_HEADER, &eval_rows)?);
    }
    a.add(out_file(cfg, SWEEP_FILE), to_csv(SWEEP_HEADER, &rows)?);
    Ok((rows, a.commit()?))
}

/// `render`: SVG of evaluation episode `episode`, plus its trace as JSON
/// lines.
pub fn render(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    force: bool,
    episode: usize,
) -> Result<Vec<PathBuf>, HarnessError> {
    let agent = load_agent(cfg, require(checkpoint, "render")?, force)?;
    let (_, episodes) = play_eval(cfg, &agent)?;
    let mut a = Artifacts::default();
    let stem = format!("{}_{episode:03}", cfg.task.name());
    match (&agent, episodes) {
        (_, Episodes::Spaceship(traces)) => {
            let available = traces.len();
            let t = traces.get(episode).ok_or(HarnessError::EpisodeOutOfRange {
                index: episode,
                available,
            })?;
            a.add(out_file(cfg, &format!("{stem}.svg")), spaceship_svg(t).into_bytes());
            a.add(out_file(cfg, &format!("{stem}.jsonl")), t.to_json_lines().into_bytes());
        }
        (Agent::Maze { tasks, .. }, Episodes::Maze(eps)) => {
            let available = eps.len();
            let (task, ep) = eps.get(episode).ok_or(HarnessError::EpisodeOutOfRange {
                index: episode,
                available,
            })?;
            a.add(
                out_file(cfg, &format!("{stem}.svg")),
                maze_svg(&tasks[*task].maze, ep).into_bytes(),
            );
            let mut lines = String::new();
            for slot in &ep.slots {
                lines.push_str(&serde_json::to_string(slot).expect("slot serialises"));
                lines.push('\n');
            }
            a.add(out_file(cfg, &format!("{stem}.jsonl")), lines.into_bytes());
        }
        (Agent::Spaceship(_), Episodes::Maze(_)) => unreachable!("episodes follow the agent's task"),
    }
    a.commit()
}

/// `tree-stats`: histogram of imagination-tree shapes over the evaluation
/// episodes, most frequent first.
pub fn tree_stats(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    force: bool,
) -> Result<(Vec<TreeStatsRow>, Vec<PathBuf>), HarnessError> {
    let agent = load_agent(cfg, require(checkpoint, "tree-stats")?, force)?;
    let (_, episodes) = play_eval(cfg, &agent)?;
    let hist = match &episodes {
        Episodes::Spaceship(traces) => {
            let mut trees = Vec::new();
            for t in traces {
                trees.extend(tree_from_trace(&t.records).map_err(ibp::planner::PlannerError::from)?);
            }
            shape_histogram(&trees)
        }
        Episodes::Maze(eps) => tree_histogram(eps.iter().map(|(_, e)| e)),
    };
    let total: usize = hist.iter().map(|(_, n)| n).sum();
    let rows: Vec<TreeStatsRow> = hist
        .into_iter()
        .map(|(shape, count)| TreeStatsRow {
            shape,
            count,
            fraction: count as f64 / total.max(1) as f64,
        })
        .collect();
    let mut a = Artifacts::default();
    a.add(out_file(cfg, TREE_STATS_FILE), to_csv(TREE_STATS_HEADER, &rows)?);
    Ok((rows, a.commit()?))
}
