//! Monte Carlo time-of-flight trials.
//!
//! One trial: draw a phase-space sample from the pre-release Gaussian state,
//! fly ballistically for `t_tof`, recapture, and read out the recapture
//! oscillation.  The recorded oscillation amplitude is
//! `sqrt(z^2 + (v/omega0)^2)` — position at recapture plus the in-quadrature
//! contribution of the residual velocity — and the measured velocity is that
//! amplitude divided by the flight time, signed by the displacement
//! direction.  Optionally each trial also synthesizes the photodetector
//! trace for the full filter-and-fit analysis chain.
//!
//! Determinism: every trial derives its own generator from the master seed
//! in counter mode, so ensembles are reproducible bit-for-bit regardless of
//! thread count or execution order.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phasespace::{GaussianState, NormalizedVariance, PhysicalParams};
use crate::protocol::ProtocolSchedule;
use crate::trace::Trace;

/// Measurement-chain configuration: trace synthesis and injected noise.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NoiseSpec {
    /// White detector noise density, trace units per sqrt(Hz).
    pub detector_noise_density: f64,
    /// Trace sample rate, Hz.
    pub sample_rate: f64,
    /// Trace duration, s.
    pub trace_duration: f64,
    /// Extra velocity noise injected per trial, expressed as a normalised
    /// variance (units of V0).  Models the technical noise floor of the
    /// velocity measurement (optical-lattice jitter and friends).
    pub lattice_jitter_variance: f64,
    /// Constant velocity offset added during the flight, m/s.  Shifts the
    /// centre of the measured velocity distribution without broadening it.
    pub drift_velocity: f64,
    /// Synthesize a photodetector trace per trial (off keeps large sweeps
    /// cheap; the direct amplitude path is used instead).
    pub synthesize_traces: bool,
    /// Photodetector calibration applied when synthesizing traces, V/m.
    pub calibration_volts_per_meter: f64,
    /// Optional narrowband low-frequency interferer (rms amplitude in trace
    /// units) used to exercise the band-pass filter; off when zero.
    pub low_freq_rms: f64,
    /// Frequency of the low-frequency interferer, Hz.
    pub low_freq_hz: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            detector_noise_density: 0.0,
            sample_rate: 3.2e6,
            trace_duration: 1e-3,
            lattice_jitter_variance: 0.0,
            drift_velocity: 0.0,
            synthesize_traces: false,
            calibration_volts_per_meter: 1e9,
            low_freq_rms: 0.0,
            low_freq_hz: 5e3,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self, params: &PhysicalParams) -> Result<()> {
        if self.detector_noise_density < 0.0
            || self.lattice_jitter_variance < 0.0
            || self.low_freq_rms < 0.0
        {
            return Err(Error::invalid("noise magnitudes must be >= 0"));
        }
        if self.synthesize_traces {
            if !(self.sample_rate > 0.0 && self.trace_duration > 0.0) {
                return Err(Error::invalid("trace sample rate and duration must be > 0"));
            }
            let f0 = params.omega0 / std::f64::consts::TAU;
            if self.sample_rate <= 2.0 * f0 {
                return Err(Error::invalid(format!(
                    "sample rate {} Hz under-samples the {} Hz oscillation",
                    self.sample_rate, f0
                )));
            }
            if !(self.calibration_volts_per_meter > 0.0) {
                return Err(Error::invalid("trace calibration must be > 0"));
            }
        }
        Ok(())
    }
}

/// One time-of-flight trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TofTrial {
    /// Per-trial seed derived from the ensemble master seed.
    pub seed: u64,
    /// Sampled release position, m.
    pub release_z: f64,
    /// Sampled release velocity (after jitter injection), m/s.
    pub release_v: f64,
    /// Position at recapture, m.
    pub final_z: f64,
    /// Velocity at recapture, m/s.
    pub final_v: f64,
    /// Recapture oscillation amplitude, m.
    pub amplitude: f64,
    /// Recapture oscillation phase, rad in [0, 2π).
    pub phase: f64,
    /// TOF velocity estimate: amplitude / t_tof, signed by the displacement.
    pub measured_velocity: f64,
    /// Synthesized photodetector trace, when enabled.
    pub trace: Option<Trace>,
}

/// Counter-mode seed derivation (SplitMix64 finaliser).  Maps a master seed
/// and an index to decorrelated per-trial seeds independent of evaluation
/// order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw one phase-space sample from the state, in SI units (m, m/s).
/// Uses the Cholesky factor of the 2x2 covariance.
pub fn sample_release<R: Rng>(state: &GaussianState, rng: &mut R) -> (f64, f64) {
    let cov = state.cov();
    let a = cov.zz.sqrt();
    let b = cov.zp / a;
    let c = (cov.pp - b * b).max(0.0).sqrt();
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    let z_tilde = state.mean()[0] + a * n1;
    let p_tilde = state.mean()[1] + b * n1 + c * n2;
    let params = state.params();
    (
        z_tilde * params.position_scale(),
        p_tilde * params.velocity_scale(),
    )
}

/// Recapture oscillation amplitude for a particle recaptured at position
/// `z` with velocity `v` in a trap at `omega0`.
pub fn recapture_amplitude(z: f64, v: f64, omega0: f64) -> f64 {
    (z * z + (v / omega0) * (v / omega0)).sqrt()
}

/// Run a single TOF trial from the pre-release state.
pub fn run_tof_trial(
    state: &GaussianState,
    schedule: &ProtocolSchedule,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<TofTrial> {
    noise.validate(state.params())?;
    if !(schedule.t_tof > 0.0) {
        return Err(Error::invalid("t_tof must be > 0"));
    }
    Ok(run_trial_unchecked(state, schedule, noise, seed))
}

fn run_trial_unchecked(
    state: &GaussianState,
    schedule: &ProtocolSchedule,
    noise: &NoiseSpec,
    seed: u64,
) -> TofTrial {
    let params = state.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (z, mut v) = sample_release(state, &mut rng);
    if noise.lattice_jitter_variance > 0.0 {
        let sigma = (noise.lattice_jitter_variance * params.ground_velocity_variance()).sqrt();
        let kick: f64 = rng.sample(StandardNormal);
        v += sigma * kick;
    }

    let t = schedule.t_tof;
    let final_z = z + (v + noise.drift_velocity) * t;
    let final_v = v;
    let amplitude = recapture_amplitude(final_z, final_v, params.omega0);
    // Recapture oscillation x(t') = A sin(omega0 t' + phase) with
    // sin(phase) ∝ final_z: the phase carries the displacement sign.
    let phase = final_z
        .atan2(final_v / params.omega0)
        .rem_euclid(std::f64::consts::TAU);
    let measured_velocity = (amplitude / t).copysign(final_z);

    let trace = if noise.synthesize_traces {
        Some(synthesize_trace_with(
            amplitude, phase, params, noise, &mut rng,
        ))
    } else {
        None
    };

    TofTrial {
        seed,
        release_z: z,
        release_v: v,
        final_z,
        final_v,
        amplitude,
        phase,
        measured_velocity,
        trace,
    }
}

/// Synthesize the photodetector trace for a recapture oscillation:
/// calibrated sinusoid at the trap frequency plus white detector noise and
/// an optional low-frequency interferer.
pub fn synthesize_trace(
    amplitude: f64,
    phase: f64,
    params: &PhysicalParams,
    noise: &NoiseSpec,
    seed: u64,
) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthesize_trace_with(amplitude, phase, params, noise, &mut rng)
}

fn synthesize_trace_with<R: Rng>(
    amplitude: f64,
    phase: f64,
    params: &PhysicalParams,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Trace {
    let n = (noise.trace_duration * noise.sample_rate).round() as usize;
    let dt = 1.0 / noise.sample_rate;
    // White noise of density d has per-sample sigma d sqrt(fs / 2).
    let sigma = noise.detector_noise_density * (noise.sample_rate / 2.0).sqrt();
    let lf_amp = noise.low_freq_rms * std::f64::consts::SQRT_2;
    let lf_phase: f64 = if noise.low_freq_rms > 0.0 {
        rng.sample::<f64, _>(StandardNormal) // random but seeded phase
    } else {
        0.0
    };
    let volts = noise.calibration_volts_per_meter * amplitude;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            let mut s = volts * (params.omega0 * t + phase).sin();
            if sigma > 0.0 {
                let w: f64 = rng.sample(StandardNormal);
                s += sigma * w;
            }
            if lf_amp > 0.0 {
                s += lf_amp * (std::f64::consts::TAU * noise.low_freq_hz * t + lf_phase).sin();
            }
            s
        })
        .collect();
    Trace {
        sample_rate: noise.sample_rate,
        start_time: 0.0,
        samples,
    }
}

/// One lattice-kick readout trial: residual thermal motion superposed on a
/// deterministic displacement kick.
#[derive(Debug, Clone, PartialEq)]
pub struct KickTrial {
    pub seed: u64,
    /// In-trap oscillation amplitude after the kick, m.
    pub amplitude: f64,
    /// Oscillation phase, rad in [0, 2π).
    pub phase: f64,
    pub trace: Option<Trace>,
}

/// Simulate the readout of a displacement kick of the given amplitude on
/// top of the thermal motion of `state`.  The kick is deterministic; the
/// thermal sample adds shot-to-shot amplitude and phase scatter.
pub fn lattice_kick_trial(
    state: &GaussianState,
    kick_amplitude: f64,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<KickTrial> {
    if kick_amplitude < 0.0 {
        return Err(Error::invalid("kick amplitude must be >= 0"));
    }
    let params = state.params();
    noise.validate(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (z, v) = sample_release(state, &mut rng);
    let zx = kick_amplitude + z;
    let u = v / params.omega0;
    let amplitude = zx.hypot(u);
    let phase = zx.atan2(u).rem_euclid(std::f64::consts::TAU);
    let trace = if noise.synthesize_traces {
        Some(synthesize_trace_with(
            amplitude, phase, params, noise, &mut rng,
        ))
    } else {
        None
    };
    Ok(KickTrial {
        seed,
        amplitude,
        phase,
        trace,
    })
}

/// A seeded collection of TOF trials from one pre-release state.
#[derive(Debug, Clone)]
pub struct TofEnsemble {
    pub master_seed: u64,
    pub schedule: ProtocolSchedule,
    pub trials: Vec<TofTrial>,
}

/// Run `n_trials` independent trials.  Trials are derived from the master
/// seed in counter mode and collected in index order, so the result is
/// identical for any worker count.
pub fn ensemble(
    state: &GaussianState,
    schedule: &ProtocolSchedule,
    noise: &NoiseSpec,
    n_trials: usize,
    master_seed: u64,
) -> Result<TofEnsemble> {
    noise.validate(state.params())?;
    if n_trials == 0 {
        return Err(Error::invalid("ensemble needs at least one trial"));
    }
    if !(schedule.t_tof > 0.0) {
        return Err(Error::invalid("t_tof must be > 0"));
    }
    let trials: Vec<TofTrial> = (0..n_trials as u64)
        .into_par_iter()
        .map(|i| run_trial_unchecked(state, schedule, noise, derive_seed(master_seed, i)))
        .collect();
    Ok(TofEnsemble {
        master_seed,
        schedule: *schedule,
        trials,
    })
}

impl TofEnsemble {
    pub fn velocities(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.measured_velocity).collect()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.amplitude).collect()
    }

    /// Sample variance (n-1 denominator) of the measured velocities, (m/s)^2.
    pub fn velocity_variance(&self) -> f64 {
        sample_variance(&self.velocities())
    }

    /// Measured velocity variance in units of V0, with the Monte Carlo
    /// standard error `V sqrt(2/(n-1))`.
    pub fn normalized_velocity_variance(&self, params: &PhysicalParams) -> NormalizedVariance {
        let v0 = params.ground_velocity_variance();
        let value = self.velocity_variance() / v0;
        let n = self.trials.len();
        NormalizedVariance {
            value,
            std_error: value * (2.0 / (n.max(2) - 1) as f64).sqrt(),
        }
    }

    /// Write the ensemble as CSV with columns
    /// `trial,seed,amplitude_m,velocity_m_per_s`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "trial,seed,amplitude_m,velocity_m_per_s")?;
        for (i, t) in self.trials.iter().enumerate() {
            writeln!(out, "{},{},{},{}", i, t.seed, t.amplitude, t.measured_velocity)?;
        }
        Ok(())
    }
}

pub(crate) fn sample_variance(data: &[f64]) -> f64 {
    let n = data.len();
    if n < 2 {
        return 0.0;
    }
    let mean = data.iter().sum::<f64>() / n as f64;
    data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
}
