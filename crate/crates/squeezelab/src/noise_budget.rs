//! Technical-noise budget for the measured velocity-variance floor.
//!
//! Each mechanism is expressed as its contribution to the normalised
//! velocity variance.  Calculated items follow from an input magnitude
//! through a transfer coefficient pinned at a reference magnitude of the
//! same mechanism; bounded items enter as straight upper bounds.  The sum
//! is compared against the measured r-independent floor: a budget total
//! below the floor means the identified mechanisms account for it.

use std::io::Write;

use crate::calibration::{lattice_shift_displacement, LatticeGeometry};
use crate::constants;
use crate::error::{Error, Result};
use crate::phasespace::PhysicalParams;

/// Variance contributed by trap position noise at the reference
/// displacement [`position_noise_reference`].
const POSITION_NOISE_VARIANCE_REF: f64 = 3.4e-5;

/// Variance contributed by the slow trap drift at the reference drift
/// velocity [`DRIFT_VELOCITY_REF`].
const DRIFT_VARIANCE_REF: f64 = 1e-16;

/// Trap drift velocity at the reference lattice-frequency drift
/// [`DRIFT_REFERENCE_HZ`], m/s.
const DRIFT_VELOCITY_REF: f64 = 3e-14;

/// Lattice-frequency drift the reference drift velocity corresponds to, Hz.
const DRIFT_REFERENCE_HZ: f64 = 20e3;

/// Variance contributed by gravity at the reference tilt-velocity error
/// [`tilt_velocity_reference`].
const TILT_VARIANCE_REF: f64 = 8.6e-3;

/// Tilt-stability angle of the reference setup, degrees.
const TILT_REFERENCE_STABILITY_DEG: f64 = 0.1;

/// Flight time of the reference setup, s.
const TILT_REFERENCE_TOF_S: f64 = 51e-6;

/// Everything the budget needs: squeezing working point, measured
/// anti-squeezed variance, and the technical noise magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NoiseInputs {
    /// Squeezing parameter of the working point.
    pub r: f64,
    /// Normalised variance of the pre-squeezing thermal state.
    pub v_ini: f64,
    /// Slow lattice phase noise, expressed as the equivalent
    /// laser-frequency deviation, Hz.
    pub phase_noise_density: f64,
    /// Lattice-frequency drift over a measurement campaign, Hz.
    pub resonator_drift_hz: f64,
    /// Mirror position noise reaching the trap, m.
    pub mirror_position_noise: f64,
    /// Nominal table tilt, degrees (compensated; only its stability couples).
    pub table_tilt_deg: f64,
    /// Shot-to-shot tilt stability, degrees.
    pub tilt_stability_deg: f64,
    /// Upper bound on cross-coupling from perpendicular motion.
    pub perpendicular_bound: f64,
    /// Release-timing jitter, s.
    pub timing_jitter: f64,
    /// Upper bound on table-vibration contributions.
    pub vibration_bound: f64,
    /// Measured anti-squeezed variance the timing jitter samples.
    pub v2_tilde: f64,
    pub params: PhysicalParams,
    pub geometry: LatticeGeometry,
}

impl Default for NoiseInputs {
    fn default() -> Self {
        NoiseInputs {
            r: 0.85,
            v_ini: 2.96,
            phase_noise_density: 1.0,
            resonator_drift_hz: 20e3,
            mirror_position_noise: 3e-17,
            table_tilt_deg: 2.0,
            tilt_stability_deg: 0.1,
            perpendicular_bound: 6.4e-2,
            timing_jitter: 10e-9,
            vibration_bound: 7.2e-2,
            v2_tilde: 104.0,
            params: PhysicalParams::default(),
            geometry: LatticeGeometry::default(),
        }
    }
}

impl NoiseInputs {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.geometry.validate()?;
        let nonnegative = [
            ("r", self.r),
            ("v_ini", self.v_ini),
            ("phase_noise_density", self.phase_noise_density),
            ("resonator_drift_hz", self.resonator_drift_hz),
            ("mirror_position_noise", self.mirror_position_noise),
            ("tilt_stability_deg", self.tilt_stability_deg),
            ("perpendicular_bound", self.perpendicular_bound),
            ("timing_jitter", self.timing_jitter),
            ("vibration_bound", self.vibration_bound),
            ("v2_tilde", self.v2_tilde),
        ];
        for (name, value) in nonnegative {
            if value < 0.0 {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Whether a budget entry is computed from a mechanism or only bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum EntryKind {
    Calculated,
    Bound,
}

/// A named intermediate quantity an entry derives from (displacement or
/// velocity), kept for cross-checking the transfer chain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Intermediate {
    pub name: &'static str,
    pub value: f64,
}

/// One budget line: a mechanism and its variance contribution.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BudgetEntry {
    pub label: &'static str,
    pub description: String,
    pub value: f64,
    pub kind: EntryKind,
    pub intermediate: Option<Intermediate>,
}

/// The compiled budget: all entries plus their sum.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NoiseBudgetReport {
    pub entries: Vec<BudgetEntry>,
    pub total: f64,
}

impl NoiseBudgetReport {
    pub fn entry(&self, label: &str) -> Option<&BudgetEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// True when the identified mechanisms stay below the measured floor.
    pub fn consistent_with(&self, measured_floor: f64) -> bool {
        self.total <= measured_floor
    }

    /// CSV with one row per entry and a final total row.  Descriptions
    /// avoid commas, so the format stays trivially parseable.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "label,kind,value,intermediate_name,intermediate_value,description"
        )?;
        for e in &self.entries {
            let (iname, ivalue) = match &e.intermediate {
                Some(i) => (i.name, format!("{}", i.value)),
                None => ("", String::new()),
            };
            let kind = match e.kind {
                EntryKind::Calculated => "calculated",
                EntryKind::Bound => "bound",
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.label, kind, e.value, iname, ivalue, e.description
            )?;
        }
        writeln!(out, "total,,{},,,", self.total)?;
        Ok(())
    }
}

/// Leakage of the anti-squeezed quadrature through the finite flight time:
/// `v_ini e^(4r) / (ω0 t_tof)²`.  This is the irreducible part of the
/// measured floor set by the initial position spread.
pub fn initial_position_variance(r: f64, v_ini: f64, params: &PhysicalParams) -> Result<f64> {
    if r < 0.0 || v_ini < 0.0 {
        return Err(Error::invalid("r and v_ini must be >= 0"));
    }
    params.validate()?;
    let w = params.omega0_t_tof();
    Ok(v_ini * (4.0 * r).exp() / (w * w))
}

/// Reference trap displacement for the position-noise transfer: the shift
/// produced by a 1 Hz lattice detuning in the reference geometry, m.
pub fn position_noise_reference() -> f64 {
    lattice_shift_displacement(&LatticeGeometry::default(), std::f64::consts::TAU)
        .expect("reference geometry is valid")
}

/// Variance contributed by a trap position noise `dz` (m), scaled
/// quadratically from the reference magnitude.
pub fn position_noise_variance(dz: f64) -> Result<f64> {
    if dz < 0.0 {
        return Err(Error::invalid("position noise must be >= 0"));
    }
    let ratio = dz / position_noise_reference();
    Ok(POSITION_NOISE_VARIANCE_REF * ratio * ratio)
}

/// Trap position noise equivalent to the lattice phase noise input, m.
pub fn phase_noise_displacement(inputs: &NoiseInputs) -> Result<f64> {
    lattice_shift_displacement(
        &inputs.geometry,
        std::f64::consts::TAU * inputs.phase_noise_density,
    )
}

/// Slow trap drift velocity implied by the lattice-frequency drift, m/s,
/// scaled linearly from the reference drift.
pub fn drift_velocity(inputs: &NoiseInputs) -> Result<f64> {
    let dz = lattice_shift_displacement(
        &inputs.geometry,
        std::f64::consts::TAU * inputs.resonator_drift_hz,
    )?;
    let dz_ref = lattice_shift_displacement(
        &LatticeGeometry::default(),
        std::f64::consts::TAU * DRIFT_REFERENCE_HZ,
    )?;
    Ok(DRIFT_VELOCITY_REF * dz / dz_ref)
}

/// Variance contributed by a trap drift velocity `v` (m/s).
pub fn drift_variance(v: f64) -> Result<f64> {
    if v < 0.0 {
        return Err(Error::invalid("drift velocity must be >= 0"));
    }
    let ratio = v / DRIFT_VELOCITY_REF;
    Ok(DRIFT_VARIANCE_REF * ratio * ratio)
}

/// Velocity error from the tilt instability of the release direction:
/// half the projected gravitational velocity picked up over the flight,
/// `g · t_tof · Δθ/2` with `Δθ` in radians.
pub fn tilt_velocity(inputs: &NoiseInputs) -> Result<f64> {
    if inputs.tilt_stability_deg < 0.0 {
        return Err(Error::invalid("tilt stability must be >= 0"));
    }
    let dtheta = inputs.tilt_stability_deg.to_radians();
    Ok(constants::G_STANDARD * inputs.params.t_tof * dtheta / 2.0)
}

/// Tilt-velocity error of the reference setup, m/s.
pub fn tilt_velocity_reference() -> f64 {
    constants::G_STANDARD * TILT_REFERENCE_TOF_S * TILT_REFERENCE_STABILITY_DEG.to_radians() / 2.0
}

/// Variance contributed by a tilt-velocity error `v` (m/s).
pub fn tilt_variance(v: f64) -> Result<f64> {
    if v < 0.0 {
        return Err(Error::invalid("tilt velocity must be >= 0"));
    }
    let ratio = v / tilt_velocity_reference();
    Ok(TILT_VARIANCE_REF * ratio * ratio)
}

/// Variance sampled off the anti-squeezed quadrature by release-timing
/// jitter: `v2 · sin²(ω0 · jitter)`.
pub fn timing_jitter_variance(v2_tilde: f64, jitter: f64, omega0: f64) -> Result<f64> {
    if v2_tilde < 0.0 || jitter < 0.0 || !(omega0 > 0.0) {
        return Err(Error::invalid(
            "v2 and jitter must be >= 0, omega0 > 0",
        ));
    }
    Ok(v2_tilde * (omega0 * jitter).sin().powi(2))
}

/// Compile the full budget from the inputs.
pub fn compile_budget(inputs: &NoiseInputs) -> Result<NoiseBudgetReport> {
    inputs.validate()?;
    let mut entries = Vec::with_capacity(8);

    entries.push(BudgetEntry {
        label: "initial_position_spread",
        description: format!(
            "anti-squeezed position spread leaking through the finite flight (r={}; v_ini={})",
            inputs.r, inputs.v_ini
        ),
        value: initial_position_variance(inputs.r, inputs.v_ini, &inputs.params)?,
        kind: EntryKind::Calculated,
        intermediate: None,
    });

    let dz_phase = phase_noise_displacement(inputs)?;
    entries.push(BudgetEntry {
        label: "lattice_phase_noise",
        description: format!(
            "trap position noise from {} Hz equivalent lattice phase noise",
            inputs.phase_noise_density
        ),
        value: position_noise_variance(dz_phase)?,
        kind: EntryKind::Calculated,
        intermediate: Some(Intermediate {
            name: "position_noise_m",
            value: dz_phase,
        }),
    });

    let v_drift = drift_velocity(inputs)?;
    entries.push(BudgetEntry {
        label: "lattice_frequency_drift",
        description: format!(
            "slow trap drift from {} Hz lattice-frequency drift",
            inputs.resonator_drift_hz
        ),
        value: drift_variance(v_drift)?,
        kind: EntryKind::Calculated,
        intermediate: Some(Intermediate {
            name: "drift_velocity_m_per_s",
            value: v_drift,
        }),
    });

    let v_tilt = tilt_velocity(inputs)?;
    entries.push(BudgetEntry {
        label: "gravity_tilt_release",
        description: format!(
            "gravity projection from a {} deg table tilt stable to {} deg",
            inputs.table_tilt_deg, inputs.tilt_stability_deg
        ),
        value: tilt_variance(v_tilt)?,
        kind: EntryKind::Calculated,
        intermediate: Some(Intermediate {
            name: "tilt_velocity_m_per_s",
            value: v_tilt,
        }),
    });

    entries.push(BudgetEntry {
        label: "mirror_position_noise",
        description: format!(
            "mirror position noise of {} m reaching the trap",
            inputs.mirror_position_noise
        ),
        value: position_noise_variance(inputs.mirror_position_noise)?,
        kind: EntryKind::Calculated,
        intermediate: Some(Intermediate {
            name: "position_noise_m",
            value: inputs.mirror_position_noise,
        }),
    });

    entries.push(BudgetEntry {
        label: "perpendicular_motion",
        description: "cross-coupling from motion perpendicular to the measured axis".to_string(),
        value: inputs.perpendicular_bound,
        kind: EntryKind::Bound,
        intermediate: None,
    });

    entries.push(BudgetEntry {
        label: "release_timing_jitter",
        description: format!(
            "{} s release jitter sampling the anti-squeezed quadrature (v2={})",
            inputs.timing_jitter, inputs.v2_tilde
        ),
        value: timing_jitter_variance(inputs.v2_tilde, inputs.timing_jitter, inputs.params.omega0)?,
        kind: EntryKind::Calculated,
        intermediate: None,
    });

    entries.push(BudgetEntry {
        label: "table_vibration",
        description: "residual table vibration during the flight".to_string(),
        value: inputs.vibration_bound,
        kind: EntryKind::Bound,
        intermediate: None,
    });

    let total = entries.iter().map(|e| e.value).sum();
    Ok(NoiseBudgetReport { entries, total })
}
