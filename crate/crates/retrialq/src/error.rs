//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes used by the command-line front end.
///
/// 0 ok, 2 invalid configuration, 3 non-convergence, 4 dimension cap,
/// 5 infeasible optimization, 1 anything else.
#[derive(Debug, Error)]
pub enum Error {
    /// A model or manifest failed validation. The string carries the full
    /// violation report, one line per violated invariant.
    #[error("invalid configuration:\n{0}")]
    InvalidConfig(String),

    /// A matrix that must be irreducible is not; the message names the
    /// communicating classes found.
    #[error("irreducibility violated in {context}: communicating classes {classes:?}")]
    Irreducible {
        context: String,
        classes: Vec<Vec<usize>>,
    },

    /// A dense operator would exceed the configured entry cap.
    #[error("dimension cap exceeded building {what}: {rows} x {cols} entries > cap {cap}")]
    DimensionCap {
        what: String,
        rows: usize,
        cols: usize,
        cap: usize,
    },

    /// A linear solve hit a singular matrix.
    #[error("singular matrix in {context}")]
    Singular { context: String },

    /// Truncation search exhausted its level budget. `deltas` carries the last
    /// observed (measure delta, tail mass) pair.
    #[error(
        "truncation did not converge within level cap {m_cap}: last measure delta {measure_delta:.3e}, last tail mass {tail_mass:.3e} (target {epsilon:.3e})"
    )]
    NonConvergence {
        m_cap: usize,
        measure_delta: f64,
        tail_mass: f64,
        epsilon: f64,
    },

    /// A measure whose normalizing rate is zero was requested.
    #[error("measure {name} is undefined: {reason}")]
    UndefinedMeasure { name: String, reason: String },

    /// The optimizer found no feasible point within its box.
    #[error("optimization infeasible: {0}")]
    Infeasible(String),

    /// Bad arguments to an operation (grids, seeds, hyperparameters, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Exit code for the CLI, one class per code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::Parse(_)
            | Error::InvalidArgument(_)
            | Error::Irreducible { .. } => 2,
            Error::NonConvergence { .. } | Error::Singular { .. } => 3,
            Error::DimensionCap { .. } => 4,
            Error::Infeasible(_) => 5,
            Error::Io(_) | Error::UndefinedMeasure { .. } => 1,
        }
    }
}
