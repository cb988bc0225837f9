use thiserror::Error;

/// Errors raised by the simulation engine and its solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("negative input `{name}` = {value}")]
    NegativeInput { name: &'static str, value: f64 },

    #[error("scenario generation failed: {0}")]
    Scenario(String),

    #[error("infeasible charging session {id}: {reason}")]
    InfeasibleSession { id: usize, reason: String },

    #[error("carbon trace: {0}")]
    CarbonTrace(String),

    #[error("qp solver: {0}")]
    Solver(String),

    #[error("dispatch: {0}")]
    Dispatch(String),

    #[error("slot {slot}: {source}")]
    AtSlot {
        slot: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("runtime invariant violated: {0}")]
    Invariant(String),

    #[error("missing reference: {0}")]
    MissingReference(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Attaches a slot index to an error raised inside a simulation loop.
    pub fn at_slot(self, slot: usize) -> Self {
        match self {
            e @ Error::AtSlot { .. } => e,
            e => Error::AtSlot {
                slot,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
