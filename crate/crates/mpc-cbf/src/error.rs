use thiserror::Error;

/// Errors surfaced by model evaluation, identification and problem setup.
///
/// Solver outcomes (infeasible, max-iter, numerical failure) are statuses on
/// [`crate::ocp::OcpSolution`], not errors: a failed solve is still a result.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Vehicle state where the model equations divide by zero.
    #[error("singular vehicle state: {0}")]
    SingularState(String),

    /// Regression data does not pin down the model.
    #[error("unidentifiable data: {0}")]
    Identifiability(String),

    /// A problem definition violates its own invariants.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}
