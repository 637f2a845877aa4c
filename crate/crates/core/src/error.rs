//! Error type shared across the engine.

/// Unified error for tensor, layer, data and i/o failures.
///
/// The variants map onto the CLI's exit-code contract: configuration and
/// usage problems exit 1, data/format problems exit 2, and numerical
/// failures (divergence, gradient-check breaches) exit 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes disagree with an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),
    /// Requested padding cannot be produced from the input extent.
    #[error("padding error: {0}")]
    Padding(String),
    /// A scalar argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A covariance matrix is not Hermitian positive definite.
    #[error("covariance error: {0}")]
    Covariance(String),
    /// A label value is out of range for the class count.
    #[error("label error: {0}")]
    Label(String),
    /// A file does not conform to its on-disk format.
    #[error("format error: {0}")]
    Format(String),
    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// Caller broke an internal API contract (e.g. mismatched state sizes).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A loss or update was requested over zero labeled samples.
    #[error("empty batch: {0}")]
    EmptyBatch(String),
    /// An evaluation mask selects no pixels.
    #[error("empty evaluation: {0}")]
    EmptyEval(String),
    /// Batch statistics are requested over too few elements.
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),
    /// Training or checking diverged: NaN/Inf loss or a tolerance breach.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
