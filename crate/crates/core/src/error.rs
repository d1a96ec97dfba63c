//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Eigenvalue clustering of a residue matrix is ambiguous at the given
    /// tolerance; the caller must adjust the tolerance or supply Jordan
    /// blocks directly.
    #[error("jordan form did not converge: {0}")]
    NonConvergence(String),

    /// Bundle data violates an invariant (dimension sums, weight lengths,
    /// puncture compatibility).
    #[error("invalid bundle spec: {0}")]
    InvalidBundle(String),

    #[error("bad grid dimensions: {0}")]
    BadDimensions(String),

    /// A conformal factor or custom table failed positivity.
    #[error("non-positive conformal factor: {0}")]
    NonPositive(String),

    /// Mean-zero Poisson problem with incompatible right-hand side.
    #[error("not solvable: {0}")]
    NotSolvable(String),

    /// Argument outside the validity range of a closed-form model formula.
    #[error("domain error: {0}")]
    DomainError(String),

    #[error("frame mismatch: expected {expected:?}, got {got:?}")]
    FrameMismatch {
        expected: crate::model::Frame,
        got: crate::model::Frame,
    },

    /// A metric or intertwiner lost positive definiteness beyond the floor.
    #[error("singular metric endomorphism: {0}")]
    SingularH(String),

    /// The flow time step underflowed while retrying positivity violations.
    #[error("step collapse: {0}")]
    StepCollapse(String),

    /// Destabilizer extraction found no spectral gap.
    #[error("no destabilizer candidate: {0}")]
    NoCandidate(String),

    #[error("zero input: {0}")]
    ZeroInput(String),

    /// Too few nodes in an asymptotic fit window.
    #[error("insufficient range: {0}")]
    InsufficientRange(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// Config validation failures; every violation is listed.
    #[error("invalid config:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
