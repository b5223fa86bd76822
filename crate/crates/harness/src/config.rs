//! Run configuration.
//!
//! A run is described by one TOML file; every key has a default, so an
//! empty file is a valid spaceship run. Command-line flags override the
//! file (see [`Overrides`]). Unknown keys are rejected.
//!
//! ```toml
//! task = "maze"          # spaceship | maze
//! strategy = "tree"      # onestep | nstep | tree | fixed (maze only)
//! seed = 7
//! out = "runs/maze"
//!
//! [limits]
//! max_imaginations = 4   # spaceship: per real action; maze: units per action
//! max_actions = 20       # spaceship: real actions; maze: episode budget
//!
//! [cost]                 # resource price per imagination
//! kind = "fixed"         # fixed | ramp (spaceship only)
//! tau = 0.0
//!
//! [maze]
//! fixture = "multi-5x5"  # single | multi-5x5 | multi-7x7 | path to a maze file
//! macro_len = 1
//!
//! [train]                # spaceship training
//! iterations = 2000
//!
//! [eval]
//! episodes = 512
//! ```

use std::path::{Path, PathBuf};

use ibp::maze::{fixtures, parse_maze_set, Maze};
use ibp::maze_planner::{prepare_tasks, ManagerTrainConfig, MazeAgentConfig, MazeTask, QLearningConfig};
use ibp::planner::{AgentConfig, EpisodeLimits, EpisodeSpec, ResourceSchedule, Strategy};
use ibp::rng::{SeedTree, Stream};
use ibp::spaceship::TaskConfig;
use ibp::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Spaceship,
    Maze,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Spaceship => "spaceship",
            TaskKind::Maze => "maze",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Onestep,
    Nstep,
    #[default]
    Tree,
    /// Hand-written best-first manager; maze only.
    Fixed,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Onestep => "onestep",
            StrategyKind::Nstep => "nstep",
            StrategyKind::Tree => "tree",
            StrategyKind::Fixed => "fixed",
        }
    }
}

/// Per-episode limits. `None` takes the task's default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub max_actions: Option<usize>,
    pub max_imaginations: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out spaceship scenes. Maze evaluation plays every candidate
    /// goal of every maze once.
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeSettings {
    pub fixture: String,
    pub macro_len: u32,
    pub step_size: f64,
    pub consolidation_sweeps: usize,
    pub qlearning: QLearningConfig,
    pub manager: ManagerTrainConfig,
}

impl Default for MazeSettings {
    fn default() -> Self {
        let agent = MazeAgentConfig::default();
        Self {
            fixture: "multi-5x5".into(),
            macro_len: agent.macro_len,
            step_size: agent.step_size,
            consolidation_sweeps: agent.consolidation_sweeps,
            qlearning: QLearningConfig::default(),
            manager: ManagerTrainConfig::default(),
        }
    }
}

/// Grid for `sweep`. An empty axis holds the run's own value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub tau: Vec<f64>,
    pub max_imaginations: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub strategy: StrategyKind,
    /// Root of every random stream. Never taken from the clock.
    pub seed: u64,
    pub out: PathBuf,
    pub limits: Limits,
    pub cost: ResourceSchedule,
    pub train: TrainConfig,
    pub agent: AgentConfig,
    pub physics: TaskConfig,
    pub eval: EvalConfig,
    pub maze: MazeSettings,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::default(),
            strategy: StrategyKind::default(),
            seed: 0,
            out: PathBuf::from("runs/default"),
            limits: Limits::default(),
            cost: ResourceSchedule::default(),
            train: TrainConfig::default(),
            agent: AgentConfig::default(),
            physics: TaskConfig::default(),
            eval: EvalConfig::default(),
            maze: MazeSettings::default(),
            sweep: SweepGrid::default(),
        }
    }
}

/// Command-line overrides; `None` keeps the file's value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub task: Option<TaskKind>,
    pub strategy: Option<StrategyKind>,
    pub max_imaginations: Option<usize>,
    pub max_actions: Option<usize>,
    pub tau: Option<f64>,
}

/// SHA-256 of the settings that give checkpoint tensors their meaning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.iter().try_for_each(|b| write!(f, "{b:02x}"))
    }
}

const SPACESHIP_ACTIONS: usize = 1;
const SPACESHIP_IMAGINATIONS: usize = 2;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        if !path.exists() {
            return Err(HarnessError::MissingFile { path: path.into() });
        }
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::parse(&text).map_err(|e| HarnessError::ConfigSyntax {
            path: path.into(),
            source: Box::new(e),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(t) = o.task {
            self.task = t;
        }
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(n) = o.max_imaginations {
            self.limits.max_imaginations = Some(n);
        }
        if let Some(n) = o.max_actions {
            self.limits.max_actions = Some(n);
        }
        if let Some(tau) = o.tau {
            self.cost = ResourceSchedule::Fixed { tau };
        }
    }

    pub fn max_actions(&self) -> usize {
        self.limits.max_actions.unwrap_or(match self.task {
            TaskKind::Spaceship => SPACESHIP_ACTIONS,
            TaskKind::Maze => MazeAgentConfig::default().episode_budget as usize,
        })
    }

    pub fn max_imaginations(&self) -> usize {
        self.limits.max_imaginations.unwrap_or(match self.task {
            TaskKind::Spaceship => SPACESHIP_IMAGINATIONS,
            TaskKind::Maze => MazeAgentConfig::default().imagination_budget as usize,
        })
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    /// Check everything that can be checked before any work starts,
    /// including that referenced files exist.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.max_actions() == 0 {
            return bad("limits.max_actions must be positive".into());
        }
        match self.cost {
            ResourceSchedule::Fixed { tau } if !(tau >= 0.0 && tau.is_finite()) => {
                return bad(format!("cost.tau must be a finite non-negative number, got {tau}"));
            }
            ResourceSchedule::Ramp { per_execution } if !(per_execution >= 0.0 && per_execution.is_finite()) => {
                return bad(format!(
                    "cost.per_execution must be finite and non-negative, got {per_execution}"
                ));
            }
            _ => {}
        }
        if self.sweep.tau.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return bad("sweep.tau values must be finite and non-negative".into());
        }
        match self.task {
            TaskKind::Spaceship => {
                if self.strategy == StrategyKind::Fixed {
                    return bad("strategy \"fixed\" exists for the maze task only".into());
                }
                if self.eval.episodes == 0 {
                    return bad("eval.episodes must be positive".into());
                }
                self.train.validate()?;
            }
            TaskKind::Maze => {
                if matches!(self.cost, ResourceSchedule::Ramp { .. }) {
                    return bad("the maze task takes a fixed cost only".into());
                }
                if u32::try_from(self.max_actions()).is_err() || u32::try_from(self.max_imaginations()).is_err() {
                    return bad("maze limits must fit in 32 bits".into());
                }
                self.maze_agent().validate()?;
                if self.maze.manager.iterations > 0 && self.maze.manager.batch == 0 {
                    return bad("maze.manager.batch must be positive".into());
                }
                self.mazes()?;
            }
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyKind::Onestep => Strategy::OneStep,
            StrategyKind::Nstep => Strategy::NStep,
            StrategyKind::Tree | StrategyKind::Fixed => Strategy::Tree,
        }
    }

    /// Episode settings of the spaceship task.
    pub fn spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            task: self.physics.clone(),
            limits: EpisodeLimits::new(self.max_actions(), self.max_imaginations()),
            strategy: self.strategy(),
            schedule: self.cost,
        }
    }

    /// Agent settings of the maze task.
    pub fn maze_agent(&self) -> MazeAgentConfig {
        MazeAgentConfig {
            imagination_budget: self.max_imaginations() as u32,
            macro_len: self.maze.macro_len,
            step_size: self.maze.step_size,
            resource_cost: match self.cost {
                ResourceSchedule::Fixed { tau } => tau,
                ResourceSchedule::Ramp { .. } => 0.0,
            },
            episode_budget: self.max_actions() as u32,
            consolidation_sweeps: self.maze.consolidation_sweeps,
        }
    }

    /// The mazes named by `maze.fixture`.
    pub fn mazes(&self) -> Result<Vec<Maze>, HarnessError> {
        Ok(match self.maze.fixture.as_str() {
            "single" => vec![fixtures::single()],
            "multi-5x5" => fixtures::multi_5x5(),
            "multi-7x7" => fixtures::multi_7x7(),
            other => {
                let path = Path::new(other);
                if !path.exists() {
                    return Err(HarnessError::MissingFile { path: path.into() });
                }
                let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
                parse_maze_set(&text)?
            }
        })
    }

    /// Mazes with pre-trained controllers. The single-maze fixture keeps
    /// its held-out goal out of training.
    pub fn maze_tasks(&self) -> Result<Vec<MazeTask>, HarnessError> {
        let seeds = self.seeds();
        let mazes = self.mazes()?;
        if self.maze.fixture == "single" {
            let maze = mazes.into_iter().next().expect("one maze");
            let train = maze
                .candidate_goals()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != fixtures::SINGLE_HELD_OUT)
                .map(|(_, g)| *g)
                .collect();
            let rng = &mut seeds.rng(Stream::QLearning, 0);
            return Ok(vec![MazeTask::prepare(maze, train, &self.maze.qlearning, rng)?]);
        }
        Ok(prepare_tasks(mazes, &self.maze.qlearning, &seeds)?)
    }

    /// Hash of task, strategy, limits, cost, network shapes, physics and
    /// maze layout. Seeds, output paths and training hyperparameters are
    /// left out, so a checkpoint can be evaluated under another seed.
    pub fn fingerprint(&self) -> Fingerprint {
        #[derive(Serialize)]
        struct View<'a> {
            task: TaskKind,
            strategy: StrategyKind,
            max_actions: usize,
            max_imaginations: usize,
            cost: ResourceSchedule,
            agent: Option<&'a AgentConfig>,
            physics: Option<&'a TaskConfig>,
            maze_fixture: Option<&'a str>,
            macro_len: Option<u32>,
        }
        let spaceship = self.task == TaskKind::Spaceship;
        let view = View {
            task: self.task,
            strategy: self.strategy,
            max_actions: self.max_actions(),
            max_imaginations: self.max_imaginations(),
            cost: self.cost,
            agent: spaceship.then_some(&self.agent),
            physics: spaceship.then_some(&self.physics),
            maze_fixture: (!spaceship).then_some(self.maze.fixture.as_str()),
            macro_len: (!spaceship).then_some(self.maze.macro_len),
        };
        let bytes = serde_json::to_vec(&view).expect("fingerprint view serialises");
        Fingerprint(Sha256::digest(&bytes).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_run() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn written_config_reads_back() {
        let mut c = RunConfig {
            task: TaskKind::Maze,
            cost: ResourceSchedule::Fixed { tau: 0.05 },
            ..Default::default()
        };
        c.sweep.tau = vec![0.0, 0.1];
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("tsak = \"maze\"").is_err());
        assert!(RunConfig::parse("[limits]\nmax_action = 3").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse("seed = 3\n[cost]\nkind = \"ramp\"\nper_execution = 0.5").unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            tau: Some(0.1),
            max_imaginations: Some(5),
            ..Default::default()
        });
        assert_eq!(c.seed, 9);
        assert_eq!(c.cost, ResourceSchedule::Fixed { tau: 0.1 });
        assert_eq!(c.spec().limits.max_imagined_steps, 5);
    }

    #[test]
    fn fingerprint_ignores_seed_but_not_limits() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 11;
        b.out = "elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.limits.max_imaginations = Some(3);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().to_string().len(), 64);
    }

    #[test]
    fn missing_maze_file_fails_validation() {
        let c = RunConfig::parse("task = \"maze\"\n[maze]\nfixture = \"/nonexistent/mazes.txt\"").unwrap();
        assert!(matches!(c.validate(), Err(HarnessError::MissingFile { .. })));
    }

    #[test]
    fn fixed_manager_is_maze_only() {
        let c = RunConfig::parse("strategy = \"fixed\"").unwrap();
        assert!(c.validate().is_err());
    }
}
