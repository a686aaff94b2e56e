use thiserror::Error;

use crate::simplex::LevelSet;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("not a probability vector: {0}")]
    InvalidProbVector(String),

    #[error("level set {0} is not a member of V(lambda={1}, k={2})")]
    NotMember(LevelSet, u32, usize),

    #[error("invalid grid vector: {0}")]
    InvalidLevelSet(String),

    #[error("enumeration of V(lambda={lambda}, k={k}) refused: C(lambda+k, k) = {bound} exceeds cap {cap}")]
    EnumerationTooLarge {
        lambda: u32,
        k: usize,
        bound: u128,
        cap: u128,
    },

    #[error("non-finite coordinate in projection input")]
    NonFinite,

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("invalid predictor: {0}")]
    InvalidPredictor(String),

    #[error(
        "unknown scenario '{0}' (expected perfect, overconfident, shifted or random-miscalibrated)"
    )]
    UnknownScenario(String),

    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),

    #[error("query event overlaps an event previously queried on pool '{pool}'")]
    OverlappingQuery { pool: String },

    #[error("query budget of {budget} disjoint events exhausted on pool '{pool}'")]
    QueryBudgetExceeded { pool: String, budget: usize },

    #[error("structure invariant violated: {0}")]
    InvariantViolation(String),

    #[error("estimate failure: {0}")]
    EstimateFailure(String),

    #[error("iteration guard tripped: t_max = {t_max} iterations reached with cached errors still above threshold")]
    IterationLimit { t_max: u64 },
}
