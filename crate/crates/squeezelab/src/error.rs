//! Error type shared across the crate.

/// Everything that can go wrong in the simulation and analysis chain.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A physical parameter or configuration value is out of range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Not enough data points to run the requested estimator.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Input data are degenerate (zero spread, singular design matrix, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A nonlinear fit exhausted its iteration budget without converging.
    #[error("fit did not converge: {0}")]
    FitDidNotConverge(String),

    /// Too large a fraction of trials was dropped by per-trial fits.
    #[error("dropped {dropped} of {total} trials (> 5% budget)")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn insufficient(msg: impl Into<String>) -> Self {
        Error::InsufficientData(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }
}
