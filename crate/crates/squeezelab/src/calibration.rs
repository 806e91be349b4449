//! Detector calibration: converting photodetector voltages to motion.
//!
//! Two independent routes to the volts-per-meter factor:
//! * time-of-flight thermometry — the velocity width of a thermal state of
//!   known occupation fixes the scale of the measured widths;
//! * lattice shift — stepping the lattice detuning displaces the trap by a
//!   computable distance and the resulting oscillation amplitude is read
//!   off the detector.
//! Their agreement is the cross-check that the TOF velocity scale is
//! trustworthy.

use crate::constants;
use crate::error::{Error, Result};
use crate::phasespace::PhysicalParams;

/// How a calibration factor was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum CalibrationMethod {
    TimeOfFlight,
    LatticeShift,
}

/// A photodetector calibration factor with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CalibrationFactor {
    pub volts_per_meter: f64,
    pub std_error: f64,
    pub method: CalibrationMethod,
}

impl CalibrationFactor {
    /// Fold a relative systematic uncertainty into the error in quadrature.
    pub fn with_systematic(&self, fraction: f64) -> Result<CalibrationFactor> {
        if fraction < 0.0 {
            return Err(Error::invalid("systematic fraction must be >= 0"));
        }
        Ok(CalibrationFactor {
            std_error: self
                .std_error
                .hypot(fraction * self.volts_per_meter),
            ..*self
        })
    }

    /// Relative discrepancy |k1 - k2| / mean against another factor.
    pub fn relative_difference(&self, other: &CalibrationFactor) -> f64 {
        let mean = 0.5 * (self.volts_per_meter + other.volts_per_meter);
        (self.volts_per_meter - other.volts_per_meter).abs() / mean
    }

    /// Discrepancy in units of the combined standard error.
    pub fn discrepancy_significance(&self, other: &CalibrationFactor) -> f64 {
        let combined = self.std_error.hypot(other.std_error);
        (self.volts_per_meter - other.volts_per_meter).abs() / combined
    }
}

/// Temperature inferred from the ratio of motional power-spectral-density
/// areas: `T = T_ref · area / reference_area`.
pub fn psd_temperature_ratio(
    reference_temperature: f64,
    area: f64,
    reference_area: f64,
) -> Result<f64> {
    if !(reference_temperature > 0.0 && area > 0.0 && reference_area > 0.0) {
        return Err(Error::invalid(
            "temperatures and PSD areas must be > 0",
        ));
    }
    Ok(reference_temperature * area / reference_area)
}

/// Mean thermal occupation at temperature `T`: `n = k_B T / (ħ ω0) - 1/2`
/// (classical equipartition regime).
pub fn occupation_from_temperature(temperature: f64, params: &PhysicalParams) -> Result<f64> {
    if temperature < 0.0 {
        return Err(Error::invalid("temperature must be >= 0"));
    }
    Ok(constants::KB * temperature / (constants::HBAR * params.omega0) - 0.5)
}

/// Thermal velocity width at occupation `n`: `sqrt(ħ ω0 (n + 1/2) / m)`, m/s.
pub fn thermal_velocity_width(occupation: f64, params: &PhysicalParams) -> Result<f64> {
    if occupation < 0.0 {
        return Err(Error::invalid("occupation must be >= 0"));
    }
    Ok((constants::HBAR * params.omega0 * (occupation + 0.5) / params.mass).sqrt())
}

/// One thermal reference point for the TOF calibration: a known occupation
/// and the uncalibrated (volt-unit) velocity width measured at it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TofCalibrationPoint {
    pub occupation: f64,
    /// Width of the TOF velocity distribution in raw detector units,
    /// V/(m/s) times the true velocity width.
    pub width_volts: f64,
}

/// Occupations at or below this are excluded from the TOF calibration: the
/// measured width there is dominated by the recoil-limited floor rather
/// than the thermal scaling the fit relies on.
pub const TOF_CALIBRATION_MIN_OCCUPATION: f64 = 1.5;

/// Calibrate the detector against thermal states of known occupation.
///
/// Fits `width_volts = k · dv(n)` through the origin (weighted by the
/// thermal width) and converts the velocity-unit slope `k` to volts per
/// meter through the flight time.  The quoted error is the scatter of the
/// points around the one-parameter fit.
pub fn tof_calibration(
    points: &[TofCalibrationPoint],
    params: &PhysicalParams,
) -> Result<CalibrationFactor> {
    let valid: Vec<&TofCalibrationPoint> = points
        .iter()
        .filter(|p| p.occupation > TOF_CALIBRATION_MIN_OCCUPATION)
        .collect();
    if valid.len() < 3 {
        return Err(Error::insufficient(format!(
            "{} usable calibration points (occupation > {}); need at least 3",
            valid.len(),
            TOF_CALIBRATION_MIN_OCCUPATION
        )));
    }
    if valid.iter().any(|p| !(p.width_volts > 0.0)) {
        return Err(Error::invalid("measured widths must be > 0"));
    }
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for p in &valid {
        let x = thermal_velocity_width(p.occupation, params)?;
        sxx += x * x;
        sxy += x * p.width_volts;
    }
    if !(sxx > 0.0) {
        return Err(Error::degenerate("calibration widths are all zero"));
    }
    let k = sxy / sxx;
    let mut ss_res = 0.0;
    for p in &valid {
        let x = thermal_velocity_width(p.occupation, params)?;
        let r = p.width_volts - k * x;
        ss_res += r * r;
    }
    let dof = (valid.len() - 1) as f64;
    let k_err = (ss_res / dof / sxx).sqrt();
    Ok(CalibrationFactor {
        volts_per_meter: k / params.t_tof,
        std_error: k_err / params.t_tof,
        method: CalibrationMethod::TimeOfFlight,
    })
}

/// Optical-lattice geometry: mirror distance and laser wavelength.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LatticeGeometry {
    /// Distance from the retro-reflecting mirror to the trap, m.
    pub length: f64,
    /// Lattice laser wavelength, m.
    pub wavelength: f64,
}

impl Default for LatticeGeometry {
    fn default() -> Self {
        LatticeGeometry {
            length: 16.6e-3,
            wavelength: 1551.38e-9,
        }
    }
}

impl LatticeGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.wavelength > 0.0) {
            return Err(Error::invalid("lattice geometry must be positive"));
        }
        Ok(())
    }

    /// Angular frequency of the lattice laser, rad/s.
    pub fn laser_angular_frequency(&self) -> f64 {
        std::f64::consts::TAU * constants::C / self.wavelength
    }
}

/// Trap displacement produced by detuning the lattice laser by `domega`
/// (rad/s): the standing-wave node nearest the trap moves by
/// `L · δΩ / (Ω + δΩ)`.
pub fn lattice_shift_displacement(geometry: &LatticeGeometry, domega: f64) -> Result<f64> {
    geometry.validate()?;
    if domega < 0.0 {
        return Err(Error::invalid("detuning must be >= 0"));
    }
    let laser = geometry.laser_angular_frequency();
    Ok(geometry.length * domega / (laser + domega))
}

/// Oscillation amplitude excited by shifting the trap by `delta` for a
/// dwell time `tau` and shifting it back: `2 δ |sin(ω0 τ / 2)|`.  The two
/// displacement kicks interfere; a half-period dwell doubles the kick, a
/// full period cancels it.
pub fn lattice_shift_oscillation(delta: f64, tau: f64, omega0: f64) -> Result<f64> {
    if delta < 0.0 || tau < 0.0 || !(omega0 > 0.0) {
        return Err(Error::invalid(
            "displacement and dwell must be >= 0, omega0 > 0",
        ));
    }
    Ok(2.0 * delta * (omega0 * tau / 2.0).sin().abs())
}

/// One lattice-shift calibration point: the expected oscillation amplitude
/// from the known detuning and dwell, and the measured voltage amplitude.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LatticePoint {
    /// Predicted oscillation amplitude, m.
    pub expected_meters: f64,
    /// Measured oscillation amplitude, detector units.
    pub measured_volts: f64,
}

/// Calibrate the detector against known lattice-shift displacements: the
/// factor is the mean of the per-point ratios, with the standard error of
/// that mean.
pub fn lattice_calibration(points: &[LatticePoint]) -> Result<CalibrationFactor> {
    if points.len() < 2 {
        return Err(Error::insufficient(
            "lattice calibration needs at least 2 points",
        ));
    }
    if points.iter().any(|p| !(p.expected_meters > 0.0)) {
        return Err(Error::invalid("expected displacements must be > 0"));
    }
    let ratios: Vec<f64> = points
        .iter()
        .map(|p| p.measured_volts / p.expected_meters)
        .collect();
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|k| (k - mean) * (k - mean)).sum::<f64>() / (n - 1.0);
    Ok(CalibrationFactor {
        volts_per_meter: mean,
        std_error: (var / n).sqrt(),
        method: CalibrationMethod::LatticeShift,
    })
}
