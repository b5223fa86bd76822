use std::path::PathBuf;

use ibp::maze::MazeError;
use ibp::maze_planner::MazePlannerError;
use ibp::planner::PlannerError;
use ibp::trainer::TrainError;

use crate::checkpoint::CheckpointError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("{path}: {source}")]
    ConfigSyntax {
        path: PathBuf,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("checkpoint {path} was written under config fingerprint {found}, current config is {expected}; pass --force to load anyway")]
    FingerprintMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("checkpoint is needed for `{0}`; pass --checkpoint")]
    NoCheckpoint(&'static str),
    #[error("episode {index} out of range ({available} available)")]
    EpisodeOutOfRange { index: usize, available: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    MazePlanner(#[from] MazePlannerError),
    #[error(transparent)]
    Maze(#[from] MazeError),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}
