//! Batch experiment runner for the squeezing simulation toolkit: flat
//! key=value configuration, deterministic seeded runs, CSV plot data, and
//! JSON run reports.

pub mod config;
pub mod report;
pub mod runner;

pub use config::Config;
pub use report::RunReport;

/// Runner-level errors, each mapped to a process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration: unknown key, unparsable value, missing seed.
    Config(String),
    /// An estimator failed on the generated data.
    Fit(String),
    /// The Monte Carlo check deviated from the closed form beyond its budget.
    OracleDeviation { max_deviation: f64, threshold: f64 },
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 4,
            CliError::Fit(_) => 2,
            CliError::OracleDeviation { .. } => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Fit(msg) => write!(f, "fit failure: {msg}"),
            CliError::OracleDeviation {
                max_deviation,
                threshold,
            } => write!(
                f,
                "oracle deviation: max relative deviation {max_deviation:.5} exceeds {threshold:.5}"
            ),
            CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<squeezelab::Error> for CliError {
    fn from(e: squeezelab::Error) -> Self {
        match e {
            squeezelab::Error::InvalidParameter(_) => CliError::Config(e.to_string()),
            squeezelab::Error::Io(inner) => CliError::Other(inner.to_string()),
            _ => CliError::Fit(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
