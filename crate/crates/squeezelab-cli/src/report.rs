//! JSON run reports.
//!
//! Every command writes a `report.json` next to its CSV outputs recording
//! the seed, the configuration fingerprint, the full merged configuration,
//! headline results, and the list of files produced.  The report carries a
//! wall-clock timestamp for provenance and is therefore the one output file
//! excluded from byte-for-byte determinism; all CSV tables are exactly
//! reproducible from the configuration and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::Config;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunReport {
    /// Which command produced this report.
    pub experiment: String,
    /// Crate version, for provenance.
    pub version: String,
    pub master_seed: u64,
    /// Stable hash of the merged configuration.
    pub config_fingerprint: String,
    /// Wall-clock time the report was written, seconds since the epoch.
    pub timestamp_unix_s: u64,
    /// The full merged configuration the run used.
    pub config: BTreeMap<String, String>,
    /// Headline numbers, shaped per experiment.
    pub results: serde_json::Value,
    /// File names written into the output directory.
    pub outputs: Vec<String>,
}

impl RunReport {
    pub fn new(experiment: &str, cfg: &Config) -> Result<RunReport, CliError> {
        Ok(RunReport {
            experiment: experiment.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed: cfg.master_seed()?,
            config_fingerprint: cfg.fingerprint(),
            timestamp_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: cfg.echo(),
            results: serde_json::Value::Null,
            outputs: Vec::new(),
        })
    }

    /// Write `report.json` into `dir` and return its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("report.json");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Other(format!("report serialization failed: {e}")))?;
        fs::write(&path, body + "\n")?;
        Ok(path)
    }
}
