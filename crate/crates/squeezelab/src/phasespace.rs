//! Gaussian states of the particle's axial motion in normalised phase space.
//!
//! Coordinates are normalised to the native trap at `omega0`: position is
//! measured in units of `sqrt(hbar / (2 m omega0))` and momentum in units of
//! `sqrt(hbar m omega0 / 2)`.  The native ground state then has unit variance
//! in both quadratures, a thermal state at occupation `n` has variance
//! `2 n + 1`, and every physical state satisfies `det(cov) >= 1`.
//!
//! The normalisation frame is *fixed*: evolving at a different trap frequency
//! `omega != omega0` is still expressed in omega0 units, which is what makes
//! a quarter period at a lowered frequency act as a squeeze with no change of
//! basis.  All maps here are linear (or affine) on the mean and act by
//! congruence on the covariance, so states stay Gaussian throughout.

use std::f64::consts::TAU;

use crate::constants::HBAR;
use crate::error::{Error, Result};

/// Trap and particle parameters, SI units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PhysicalParams {
    /// Particle mass, kg.
    pub mass: f64,
    /// Native angular trap frequency, rad/s.
    pub omega0: f64,
    /// Reduced Planck constant, J s.  Fixed physical constant, stored so
    /// that states and derived scales are self-contained.
    pub hbar: f64,
    /// Time-of-flight duration, s.
    pub t_tof: f64,
    /// Photon-recoil (backaction) heating rate, occupation quanta per
    /// second in angular convention (2 pi times the rate in Hz).
    pub gamma_qba: f64,
    /// Background-gas heating rate, same convention.
    pub gamma_bg: f64,
}

impl Default for PhysicalParams {
    /// Nominal experiment values: 2.4e-17 kg particle in a 252 kHz trap,
    /// 51 us flight, 2.1 kHz backaction and 0.10 kHz gas heating.
    fn default() -> Self {
        PhysicalParams {
            mass: 2.4e-17,
            omega0: TAU * 252e3,
            hbar: HBAR,
            t_tof: 51e-6,
            gamma_qba: TAU * 2.1e3,
            gamma_bg: TAU * 0.10e3,
        }
    }
}

impl PhysicalParams {
    pub fn new(mass: f64, omega0: f64, t_tof: f64, gamma_qba: f64, gamma_bg: f64) -> Result<Self> {
        let p = PhysicalParams {
            mass,
            omega0,
            hbar: HBAR,
            t_tof,
            gamma_qba,
            gamma_bg,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::invalid(format!("mass must be > 0, got {}", self.mass)));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::invalid(format!(
                "omega0 must be > 0, got {}",
                self.omega0
            )));
        }
        if !(self.t_tof > 0.0 && self.t_tof.is_finite()) {
            return Err(Error::invalid(format!(
                "t_tof must be > 0, got {}",
                self.t_tof
            )));
        }
        if self.gamma_qba < 0.0 || self.gamma_bg < 0.0 {
            return Err(Error::invalid("heating rates must be >= 0"));
        }
        Ok(())
    }

    /// Zero-point position width `sqrt(hbar / (2 m omega0))`, m.
    pub fn position_scale(&self) -> f64 {
        (self.hbar / (2.0 * self.mass * self.omega0)).sqrt()
    }

    /// Zero-point velocity width `sqrt(hbar omega0 / (2 m))`, m/s.
    pub fn velocity_scale(&self) -> f64 {
        (self.hbar * self.omega0 / (2.0 * self.mass)).sqrt()
    }

    /// Ground-state velocity variance `V0 = hbar omega0 / (2 m)`, (m/s)^2.
    pub fn ground_velocity_variance(&self) -> f64 {
        self.hbar * self.omega0 / (2.0 * self.mass)
    }

    /// Dimensionless flight parameter `omega0 * t_tof`.
    pub fn omega0_t_tof(&self) -> f64 {
        self.omega0 * self.t_tof
    }

    /// Total heating rate `gamma_qba + gamma_bg`.
    pub fn gamma_total(&self) -> f64 {
        self.gamma_qba + self.gamma_bg
    }
}

/// Symmetric 2x2 covariance of the normalised quadratures (z, p).
///
/// Storing the three independent entries keeps the matrix symmetric by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Covariance {
    pub zz: f64,
    pub zp: f64,
    pub pp: f64,
}

impl Covariance {
    pub fn isotropic(v: f64) -> Self {
        Covariance {
            zz: v,
            zp: 0.0,
            pp: v,
        }
    }

    pub fn det(&self) -> f64 {
        self.zz * self.pp - self.zp * self.zp
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.zz, self.zp], [self.zp, self.pp]]
    }

    /// Congruence transform `M C M^T` for `M = [[a, b], [c, d]]`.
    fn congruence(&self, m: &[[f64; 2]; 2]) -> Covariance {
        let [[a, b], [c, d]] = *m;
        Covariance {
            zz: a * a * self.zz + 2.0 * a * b * self.zp + b * b * self.pp,
            zp: a * c * self.zz + (a * d + b * c) * self.zp + b * d * self.pp,
            pp: c * c * self.zz + 2.0 * c * d * self.zp + d * d * self.pp,
        }
    }

    /// Positive definite and at (or above) the minimum-uncertainty bound,
    /// with a small slack for accumulated rounding.
    pub fn is_physical(&self) -> bool {
        self.zz > 0.0 && self.pp > 0.0 && self.det() >= 1.0 - 1e-9
    }
}

/// Variance of the particle velocity in units of the ground-state variance
/// `V0`, optionally with the standard error of an estimate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NormalizedVariance {
    pub value: f64,
    pub std_error: f64,
}

/// A Gaussian motional state: mean vector and covariance in normalised
/// units, plus the parameters defining that normalisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianState {
    mean: [f64; 2],
    cov: Covariance,
    params: PhysicalParams,
}

impl GaussianState {
    /// Build a state from explicit mean and covariance; rejects covariances
    /// that are non-positive or below the Heisenberg bound.
    pub fn new(mean: [f64; 2], cov: Covariance, params: PhysicalParams) -> Result<Self> {
        params.validate()?;
        if !(mean[0].is_finite() && mean[1].is_finite()) {
            return Err(Error::invalid("state mean must be finite"));
        }
        if !cov.is_physical() {
            return Err(Error::invalid(format!(
                "covariance not physical: zz={}, zp={}, pp={}, det={}",
                cov.zz,
                cov.zp,
                cov.pp,
                cov.det()
            )));
        }
        Ok(GaussianState { mean, cov, params })
    }

    /// Ground state of the native trap: zero mean, identity covariance.
    pub fn ground_state(params: PhysicalParams) -> Result<Self> {
        Self::new([0.0, 0.0], Covariance::isotropic(1.0), params)
    }

    /// Thermal state at mean occupation `n`: isotropic covariance `2n + 1`.
    pub fn thermal_state(params: PhysicalParams, n: f64) -> Result<Self> {
        if !(n >= 0.0 && n.is_finite()) {
            return Err(Error::invalid(format!("occupation must be >= 0, got {n}")));
        }
        Self::new([0.0, 0.0], Covariance::isotropic(2.0 * n + 1.0), params)
    }

    pub fn mean(&self) -> [f64; 2] {
        self.mean
    }

    pub fn cov(&self) -> Covariance {
        self.cov
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    fn apply(&self, m: &[[f64; 2]; 2]) -> GaussianState {
        GaussianState {
            mean: [
                m[0][0] * self.mean[0] + m[0][1] * self.mean[1],
                m[1][0] * self.mean[0] + m[1][1] * self.mean[1],
            ],
            cov: self.cov.congruence(m),
            params: self.params,
        }
    }

    /// Evolve for `dt` in a harmonic trap at angular frequency `omega`.
    ///
    /// In the fixed omega0 normalisation the map is
    /// `[[cos θ, (omega0/omega) sin θ], [-(omega/omega0) sin θ, cos θ]]`
    /// with `θ = omega dt`; its determinant is 1, so phase-space volume is
    /// preserved.  At `omega != omega0` the map is symplectic but not a
    /// rotation — this is exactly how a quarter period at lowered frequency
    /// squeezes the state.
    pub fn evolve_harmonic(&self, omega: f64, dt: f64) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::invalid(format!(
                "trap frequency must be > 0, got {omega}"
            )));
        }
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("duration must be >= 0, got {dt}")));
        }
        let theta = omega * dt;
        let (s, c) = theta.sin_cos();
        let ratio = self.params.omega0 / omega;
        Ok(self.apply(&[[c, ratio * s], [-s / ratio, c]]))
    }

    /// Ballistic free flight for `dt`: position shears by `omega0 dt` times
    /// the momentum quadrature, momentum is unchanged.
    pub fn free_flight(&self, dt: f64) -> Result<Self> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("duration must be >= 0, got {dt}")));
        }
        Ok(self.apply(&[[1.0, self.params.omega0 * dt], [0.0, 1.0]]))
    }

    /// Isotropic diffusion from recoil and gas heating over `dt`: adds
    /// `2 (gamma_qba + gamma_bg) dt` to both quadrature variances.
    pub fn add_heating(&self, dt: f64) -> Result<Self> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("duration must be >= 0, got {dt}")));
        }
        let added = 2.0 * self.params.gamma_total() * dt;
        Ok(GaussianState {
            mean: self.mean,
            cov: Covariance {
                zz: self.cov.zz + added,
                zp: self.cov.zp,
                pp: self.cov.pp + added,
            },
            params: self.params,
        })
    }

    /// In-trap velocity variance of the state in units of `V0`; this is just
    /// the momentum-quadrature variance in the normalised frame.
    pub fn normalized_velocity_variance(&self) -> NormalizedVariance {
        NormalizedVariance {
            value: self.cov.pp,
            std_error: 0.0,
        }
    }
}
