use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("switching times {times:?} are not ordered within [{t_start}, {t_end}]")]
    NotInPolytope {
        times: Vec<f64>,
        t_start: f64,
        t_end: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("normalized time {z} outside [0, {modes}]")]
    Domain { z: f64, modes: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("rollout diverged after node {last_valid_node}")]
    RolloutDiverged { last_valid_node: usize },

    #[error("Riccati pass produced non-finite values at node {node}")]
    RiccatiDiverged { node: usize },

    #[error("sensitivity integration produced non-finite values at node {node}")]
    SensitivityDiverged { node: usize },

    #[error("input weight R is not positive definite at node {node}")]
    NotPositiveDefinite { node: usize },

    #[error("every line-search candidate rollout diverged")]
    LineSearchDiverged,

    #[error("initial controller failed in mode {mode}: {reason}; try different operating points")]
    Initialization { mode: usize, reason: String },

    #[error("SLQ iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("outer iteration {iteration}: {source}")]
    Outer {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("finite-difference oracle failed at switching index {index}: {source}")]
    Oracle {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown benchmark `{name}`; available: {}", available.join(", "))]
    UnknownBenchmark {
        name: String,
        available: Vec<String>,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_outer(self, iteration: usize) -> Self {
        Error::Outer {
            iteration,
            source: Box::new(self),
        }
    }
}
