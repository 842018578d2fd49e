use thiserror::Error;

use crate::lp::LpError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("region {0} has no states")]
    EmptyRegion(usize),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("policy cache is empty")]
    EmptyCache,

    #[error("invalid value bounds [{v_min}, {v_max}]")]
    InvalidBounds { v_min: f64, v_max: f64 },

    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),

    #[error("grid would need {count} points, budget is {budget}")]
    GridBudgetExceeded { count: u128, budget: u128 },

    #[error("LP failed for entry state {entry}, state {state}, action {action}, policy {policy}: {source}")]
    QuadrupleLp {
        entry: usize,
        state: usize,
        action: usize,
        policy: usize,
        #[source]
        source: LpError,
    },

    #[error(transparent)]
    Lp(#[from] LpError),

    #[error("explicit hull enumeration supports fan-out up to 3, got {0}; use the per-point bound LP instead")]
    UnsupportedDimension(usize),

    #[error("anchor set is affinely dependent; hull enumeration is not possible")]
    DegenerateAnchors,

    #[error("linear system could not be solved: {0}")]
    LinearSolve(String),

    #[error("cache fingerprint mismatch for region {region}: {detail}")]
    FingerprintMismatch { region: usize, detail: String },

    #[error("high-level iteration did not converge after {0} sweeps")]
    Divergence(usize),

    #[error("invalid gridworld: {0}")]
    InvalidGridworld(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
