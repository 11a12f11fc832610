//! Error type shared by all modules.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building spaces, simulating,
/// estimating responses, or running the grid oracle.
#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation received an argument outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The drift evaluated to a non-finite value; the offending state is
    /// reported so the blow-up can be located.
    #[error("drift evaluation produced a non-finite value at state {state:?}")]
    NonFiniteDrift { state: Vec<f64> },

    /// A running estimate turned non-finite (overflow or NaN poisoning).
    #[error("non-finite partial sum while {context}")]
    NonFiniteSum { context: String },

    /// The requested decorrelation horizon does not fit into the available
    /// per-chain sample budget.
    #[error(
        "decorrelation horizon of {w_steps} steps needs more than the {available} \
         post-burn-in steps available per chain; increase total_time or n_chains"
    )]
    HorizonTooLong { w_steps: usize, available: usize },

    /// A Riesz vector with no nonzero coordinate cannot be normalized: the
    /// response functional vanishes on the space.
    #[error("all coefficients are zero: the response functional vanishes on the space")]
    ZeroCoefficients,

    /// The grid cannot resolve the one-step noise width.
    #[error(
        "grid too coarse for the one-step noise width: sigma*sqrt(dt) = {noise_std} \
         requires at least {required} cells per dimension, got {m_per_dim}"
    )]
    GridTooCoarse {
        noise_std: f64,
        required: usize,
        m_per_dim: usize,
    },

    /// Dense grids are only maintained for d <= 2.
    #[error("grid oracle supports dimensions 1 and 2, got d = {d}")]
    UnsupportedDimension { d: usize },

    /// An iterative solve did not reach its tolerance within the cap.
    #[error("{what} did not converge within {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    /// A least-squares fit was requested on degenerate data.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// An error ladder that should shrink steadily stalled or grew,
    /// indicating that a noise floor or discretization artifact dominates.
    #[error("error ladder did not decay: {0}")]
    NonMonotoneLadder(String),

    /// CSV parsing failed.
    #[error("malformed table in {path}: {reason}")]
    MalformedCsv { path: String, reason: String },

    /// Underlying I/O failure, with the path that was being touched.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Convenience constructor used throughout argument validation.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
