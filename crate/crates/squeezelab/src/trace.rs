//! Uniformly sampled time series: synthesized photodetector signals and
//! their filtered versions.

use std::io::Write;

use crate::error::Result;

/// A time series sampled at a fixed rate, starting at `start_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Samples per second.
    pub sample_rate: f64,
    /// Time of the first sample, s.
    pub start_time: f64,
    pub samples: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_at(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Write the trace as CSV with columns `t_seconds,signal`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t_seconds,signal")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(out, "{},{}", self.time_at(i), s)?;
        }
        Ok(())
    }
}
