use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transition row ({state}, {action}) is not a probability distribution (sum = {sum})")]
    NonStochasticRow { state: usize, action: usize, sum: f64 },

    #[error("initial state distribution is not a probability distribution (sum = {sum})")]
    NonStochasticInitial { sum: f64 },

    #[error("discount {0} outside [0, 1)")]
    DiscountRange(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("grid row {row} has {found} cells, expected {expected}")]
    RaggedGrid { row: usize, expected: usize, found: usize },

    #[error("unknown grid character {ch:?} at row {row}, column {col}")]
    UnknownCell { ch: char, row: usize, col: usize },

    #[error("empty grid")]
    EmptyGrid,

    #[error("grid has no passable cells")]
    AllWalls,

    #[error("demonstration set is empty")]
    EmptyDemos,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fit diverged at iteration {iteration}: objective fell for {window} consecutive steps (last {objective})")]
    Divergence {
        iteration: usize,
        window: usize,
        objective: f64,
    },

    #[error("task {task}: {source}")]
    Task {
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_task(self, task: impl Into<String>) -> Self {
        Error::Task {
            task: task.into(),
            source: Box::new(self),
        }
    }
}
