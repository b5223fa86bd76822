//! Experiment plumbing for the imagination-based planner: TOML run
//! configs, the `ibp` command line, sweeps, checkpoints, CSV metrics and
//! SVG renders.
//!
//! Every output is a pure function of the config, the seed and the code:
//! running the same command twice gives byte-identical files.

pub mod checkpoint;
pub mod config;
mod error;
pub mod metrics;
pub mod render;
pub mod run;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{Fingerprint, Overrides, RunConfig, StrategyKind, TaskKind};
pub use error::HarnessError;

/// The guide's code blocks, run as doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/spaceship.md")]
    pub struct Spaceship;
    #[doc = include_str!("../../../book/src/planner.md")]
    pub struct Planner;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/maze.md")]
    pub struct Maze;
    #[doc = include_str!("../../../book/src/harness.md")]
    pub struct Harness;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub struct Reproducibility;
}
