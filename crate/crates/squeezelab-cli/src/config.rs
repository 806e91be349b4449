//! Flat `key = value` run configuration.
//!
//! Values come from three layers, later layers overwriting earlier ones:
//! a config file, repeated `--set key=value` command-line overrides, and the
//! `SQUEEZELAB_SEED` environment variable (which overwrites `master_seed`).
//! Every key is checked against the catalog below so typos fail fast, and
//! the merged map has a stable fingerprint that is echoed into run reports.

use std::collections::BTreeMap;

use squeezelab::analysis::FilterSpec;
use squeezelab::measurement::NoiseSpec;
use squeezelab::phasespace::PhysicalParams;

use crate::CliError;

/// Every key the runner understands. Keys not listed here are rejected.
pub const KNOWN_KEYS: &[&str] = &[
    // Particle and trap.
    "mass_kg",
    "trap_frequency_hz",
    "t_tof_s",
    "heating_qba_hz",
    "heating_bg_hz",
    // Initial state and switching protocol.
    "occupation",
    "r",
    "r_values",
    "n_half_periods",
    "heating",
    "hold_start_s",
    "hold_stop_s",
    "hold_points",
    "inject_v_n",
    "drift_velocity_m_per_s",
    // Monte Carlo controls.
    "n_trials",
    "master_seed",
    "workers",
    // Detector traces.
    "synthesize_traces",
    "detector_noise_density",
    "sample_rate_hz",
    "trace_duration_s",
    "calibration_volts_per_meter",
    "low_freq_rms",
    "low_freq_hz",
    // Band-pass filter used before trace fits.
    "filter_order",
    "filter_center_hz",
    "filter_bandwidth_hz",
    // Variance-model fitting.
    "fit_model",
    "fixed_floor",
    // Outputs.
    "output_dir",
    "export_ensemble",
    // Calibration runs.
    "occupations",
    "calib_trials",
    "systematic_fraction",
    "input_csv",
    "domega_values_hz",
    "tau_points",
    "traces_per_point",
    "min_kick_fraction",
    // Closed-form cross-check.
    "oracle_trials",
    "oracle_holds",
    "oracle_rs",
    "oracle_threshold",
    // Noise budget inputs.
    "budget_v_ini",
    "phase_noise_hz",
    "resonator_drift_hz",
    "mirror_position_noise_m",
    "table_tilt_deg",
    "tilt_stability_deg",
    "perpendicular_bound",
    "timing_jitter_s",
    "vibration_bound",
    "v2_tilde",
    "lattice_length_m",
    "lattice_wavelength_m",
    "measured_floor",
];

/// Merged, validated key/value store.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn parse_line(line: &str) -> Result<Option<(String, String)>, CliError> {
    let line = match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    };
    let line = line.trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected `key = value`, got `{line}`")))?;
    let key = key.trim().to_string();
    let value = value.trim().to_string();
    if !KNOWN_KEYS.contains(&key.as_str()) {
        return Err(CliError::Config(format!("unknown key `{key}`")));
    }
    Ok(Some((key, value)))
}

impl Config {
    /// Merge a config file body, `--set` overrides, and an optional
    /// environment seed into one validated map.
    pub fn from_sources(
        file_text: &str,
        overrides: &[String],
        env_seed: Option<&str>,
    ) -> Result<Config, CliError> {
        let mut values = BTreeMap::new();
        for line in file_text.lines() {
            if let Some((key, value)) = parse_line(line)? {
                if values.insert(key.clone(), value).is_some() {
                    return Err(CliError::Config(format!("duplicate key `{key}` in file")));
                }
            }
        }
        for item in overrides {
            match parse_line(item)? {
                Some((key, value)) => {
                    values.insert(key, value);
                }
                None => {
                    return Err(CliError::Config(format!("empty override `{item}`")));
                }
            }
        }
        if let Some(seed) = env_seed {
            values.insert("master_seed".to_string(), seed.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    /// Full merged map, for echoing into run reports.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.clone()
    }

    /// FNV-1a hash of the sorted `key=value` lines; stable across runs and
    /// platforms, so reports from identical configurations share it.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (key, value) in &self.values {
            feed(key.as_bytes());
            feed(b"=");
            feed(value.as_bytes());
            feed(b"\n");
        }
        format!("{hash:016x}")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T, CliError> {
        raw.parse().map_err(|_| {
            CliError::Config(format!(
                "value `{raw}` for `{key}` is not a valid {}",
                std::any::type_name::<T>()
            ))
        })
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.get(key) {
            Some(raw) => self.parse(key, raw),
            None => Ok(default),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(CliError::Config(format!(
                "value `{other}` for `{key}` must be `true` or `false`"
            ))),
            None => Ok(default),
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    /// Comma-separated list of floats.
    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, CliError> {
        match self.get(key) {
            Some(raw) => raw
                .split(',')
                .map(|item| self.parse(key, item.trim()))
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    pub fn optional_f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.get(key) {
            Some(raw) => Ok(Some(self.parse(key, raw)?)),
            None => Ok(None),
        }
    }

    /// The run seed; required so every run is reproducible on purpose.
    pub fn master_seed(&self) -> Result<u64, CliError> {
        let raw = self
            .get("master_seed")
            .ok_or_else(|| CliError::Config("missing required key `master_seed`".into()))?;
        self.parse("master_seed", raw)
    }

    pub fn output_dir(&self) -> Result<&str, CliError> {
        self.get("output_dir")
            .ok_or_else(|| CliError::Config("missing required key `output_dir`".into()))
    }

    /// Trap/particle parameters, converting Hz-valued keys to angular rates.
    pub fn physical_params(&self) -> Result<PhysicalParams, CliError> {
        let tau = std::f64::consts::TAU;
        Ok(PhysicalParams::new(
            self.f64_or("mass_kg", 2.4e-17)?,
            tau * self.f64_or("trap_frequency_hz", 252e3)?,
            self.f64_or("t_tof_s", 51e-6)?,
            tau * self.f64_or("heating_qba_hz", 2.1e3)?,
            tau * self.f64_or("heating_bg_hz", 0.10e3)?,
        )?)
    }

    /// Measurement-channel settings shared by all trial-running commands.
    pub fn noise_spec(&self) -> Result<NoiseSpec, CliError> {
        Ok(NoiseSpec {
            detector_noise_density: self.f64_or("detector_noise_density", 1e-5)?,
            sample_rate: self.f64_or("sample_rate_hz", 3.2e6)?,
            trace_duration: self.f64_or("trace_duration_s", 1e-3)?,
            lattice_jitter_variance: 0.0,
            drift_velocity: self.f64_or("drift_velocity_m_per_s", 0.0)?,
            synthesize_traces: self.bool_or("synthesize_traces", false)?,
            calibration_volts_per_meter: self.f64_or("calibration_volts_per_meter", 1e9)?,
            low_freq_rms: self.f64_or("low_freq_rms", 0.0)?,
            low_freq_hz: self.f64_or("low_freq_hz", 5e3)?,
        })
    }

    pub fn filter_spec(&self) -> Result<FilterSpec, CliError> {
        Ok(FilterSpec {
            order: self.usize_or("filter_order", 10)?,
            center: self.f64_or("filter_center_hz", 253e3)?,
            bandwidth: self.f64_or("filter_bandwidth_hz", 20e3)?,
        })
    }
}
