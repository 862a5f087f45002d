use thiserror::Error;

/// Errors produced by model validation, projections, and the solver loops.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("pseudo-gradient is not strongly monotone (mu = {mu:.6e})")]
    NotStronglyMonotone { mu: f64 },

    #[error("constraint matrix {which} of agent {agent} is rank deficient")]
    RankDeficientConstraint { agent: usize, which: &'static str },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("projection for agent {agent} infeasible (primal residual {residual:.3e})")]
    Infeasible { agent: usize, residual: f64 },

    #[error("{context}: iteration cap {iters} reached (residual {residual:.3e})")]
    MaxIterExceeded {
        context: &'static str,
        iters: usize,
        residual: f64,
    },

    #[error("singular linear system in {context} (agent {agent})")]
    SingularSystem { context: &'static str, agent: usize },

    #[error("schedule contract violation: {0}")]
    ScheduleContractViolation(String),

    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(&'static str),

    #[error("strict complementarity fails at the sampled point")]
    DegeneratePoint,
}

impl Error {
    /// Attach an agent index to errors raised inside per-agent work.
    pub(crate) fn for_agent(self, agent: usize) -> Self {
        match self {
            Error::Infeasible { residual, .. } => Error::Infeasible { agent, residual },
            Error::SingularSystem { context, .. } => Error::SingularSystem { context, agent },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
