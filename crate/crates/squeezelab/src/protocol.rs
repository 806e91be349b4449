//! The rapid frequency-switch squeezing protocol and its closed-form
//! time-of-flight predictions.
//!
//! The protocol has two timed segments starting from a thermal state of the
//! native trap: evolve for `t1` at the lowered frequency
//! `omega1 = omega0 e^{-2r}`, then hold at `omega0` for a time `hold`.  With
//! `t1` a quarter period of the lowered trap the first segment turns an
//! isotropic covariance `V I` into `diag(V e^{4r}, V e^{-4r})`; the hold
//! rotates that ellipse, periodically aligning the squeezed quadrature with
//! the velocity axis that the TOF measurement reads out.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::phasespace::{GaussianState, PhysicalParams};

/// Squeezing parameter from the trap-intensity step: `r = ln(I0/I1) / 4`,
/// equivalent to `omega1 = omega0 e^{-2r}` for omega ∝ sqrt(I).
pub fn squeezing_parameter_from_intensity(i0: f64, i1: f64) -> Result<f64> {
    if !(i0 > 0.0 && i1 > 0.0 && i0.is_finite() && i1.is_finite()) {
        return Err(Error::invalid("intensities must be positive"));
    }
    if i1 > i0 {
        return Err(Error::invalid(format!(
            "anti-squeezing request: lowered intensity {i1} exceeds initial {i0}"
        )));
    }
    Ok(0.25 * (i0 / i1).ln())
}

/// Timed description of one protocol run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ProtocolSchedule {
    /// Squeezing parameter `r >= 0`.
    pub r: f64,
    /// Lowered trap frequency `omega0 e^{-2r}`, rad/s.
    pub omega1: f64,
    /// Duration of the lowered-frequency segment, s.
    pub t1: f64,
    /// Hold duration at the native frequency, s.
    pub hold: f64,
    /// Time-of-flight duration used at release, s.
    pub t_tof: f64,
    /// Apply recoil/gas heating during the trapped segments.
    pub heating_enabled: bool,
}

impl ProtocolSchedule {
    /// The canonical schedule: a quarter period at the lowered frequency
    /// (`t1 = π / (2 omega1)`) and an integer number of native half periods
    /// (`hold = n π / omega0`), which leaves the squeezed quadrature aligned
    /// with the measured velocity axis.
    pub fn canonical(params: &PhysicalParams, r: f64, n_half_periods: u32) -> Result<Self> {
        params.validate()?;
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!(
                "squeezing parameter must be >= 0, got {r}"
            )));
        }
        let omega1 = params.omega0 * (-2.0 * r).exp();
        Ok(ProtocolSchedule {
            r,
            omega1,
            t1: PI / (2.0 * omega1),
            hold: f64::from(n_half_periods) * PI / params.omega0,
            t_tof: params.t_tof,
            heating_enabled: false,
        })
    }

    /// Replace the hold duration (seconds, >= 0).
    pub fn with_hold(mut self, hold: f64) -> Result<Self> {
        if !(hold >= 0.0 && hold.is_finite()) {
            return Err(Error::invalid(format!("hold must be >= 0, got {hold}")));
        }
        self.hold = hold;
        Ok(self)
    }

    /// Replace the lowered-frequency segment duration (seconds, >= 0).
    pub fn with_t1(mut self, t1: f64) -> Result<Self> {
        if !(t1 >= 0.0 && t1.is_finite()) {
            return Err(Error::invalid(format!("t1 must be >= 0, got {t1}")));
        }
        self.t1 = t1;
        Ok(self)
    }

    pub fn with_heating(mut self, enabled: bool) -> Self {
        self.heating_enabled = enabled;
        self
    }
}

/// Run the two-segment protocol on an initial state.  Heating, when
/// enabled, is applied as isotropic diffusion accumulated over each
/// segment's duration.
pub fn run_protocol(initial: &GaussianState, schedule: &ProtocolSchedule) -> Result<GaussianState> {
    let omega0 = initial.params().omega0;
    let mut s = initial.evolve_harmonic(schedule.omega1, schedule.t1)?;
    if schedule.heating_enabled {
        s = s.add_heating(schedule.t1)?;
    }
    s = s.evolve_harmonic(omega0, schedule.hold)?;
    if schedule.heating_enabled {
        s = s.add_heating(schedule.hold)?;
    }
    Ok(s)
}

/// Closed-form predictions for the normalised TOF velocity variance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AnalyticPrediction {
    /// Variance at the given hold time.
    pub v_tilde: f64,
    /// Variance at the periodic minima (hold = n π / omega0).
    pub v1_tilde: f64,
    /// Variance at the periodic maxima.
    pub v2_tilde: f64,
    /// Fraction of the minimum variance contributed by the squeezed
    /// velocity quadrature (the rest is the initial position spread read
    /// through the finite flight time).
    pub velocity_fraction: f64,
}

/// Normalised TOF velocity variance after the protocol, for an initial
/// isotropic variance `v_ini = 2 n + 1` (heating off):
///
/// ```text
/// V(hold) = v_ini [ 2 cosh(4r) / w^2  -  2 sin(2θ) sinh(4r) / w
///                   + e^{4r} sin^2 θ + e^{-4r} cos^2 θ ]
/// ```
///
/// with `θ = omega0 · hold` and `w = omega0 · t_tof`.  The `1/w^2` term is
/// the recapture amplitude picked up from the released position spread, the
/// `1/w` cross term reflects the position–momentum correlation at release,
/// and the last two terms are the rotated squeezed ellipse.  The simplified
/// envelope values drop the cross term at the extrema:
/// `V1 = v_ini (e^{-4r} + e^{4r}/w^2)`, `V2 = v_ini (e^{4r} + e^{4r}/w^2)`.
pub fn analytic_variance(
    r: f64,
    hold: f64,
    params: &PhysicalParams,
    v_ini: f64,
) -> Result<AnalyticPrediction> {
    params.validate()?;
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("r must be >= 0, got {r}")));
    }
    if !(hold >= 0.0 && hold.is_finite()) {
        return Err(Error::invalid(format!("hold must be >= 0, got {hold}")));
    }
    if !(v_ini >= 1.0 && v_ini.is_finite()) {
        return Err(Error::invalid(format!(
            "initial variance must be >= 1 (Heisenberg), got {v_ini}"
        )));
    }
    let w = params.omega0_t_tof();
    let theta = params.omega0 * hold;
    let e4 = (4.0 * r).exp();
    let em4 = (-4.0 * r).exp();
    let (sin_t, cos_t) = theta.sin_cos();
    let v_tilde = v_ini
        * ((e4 + em4) / (w * w) - (2.0 * theta).sin() * (e4 - em4) / w
            + e4 * sin_t * sin_t
            + em4 * cos_t * cos_t);
    Ok(AnalyticPrediction {
        v_tilde,
        v1_tilde: v_ini * (em4 + e4 / (w * w)),
        v2_tilde: v_ini * (e4 + e4 / (w * w)),
        velocity_fraction: velocity_fraction(r, w),
    })
}

/// Share of the variance minimum that comes from the squeezed velocity
/// quadrature rather than the released position spread:
/// `e^{-4r} / (e^{-4r} + e^{4r}/w^2)` with `w = omega0 t_tof`.
pub fn velocity_fraction(r: f64, omega0_t_tof: f64) -> f64 {
    let em4 = (-4.0 * r).exp();
    let e4 = (4.0 * r).exp();
    em4 / (em4 + e4 / (omega0_t_tof * omega0_t_tof))
}

/// Smallest flight time for which the squeezed-quadrature share of the
/// variance minimum reaches `fraction`.  Inverting the fraction formula
/// gives `t = e^{4r} sqrt(f / (1 - f)) / omega0`.
pub fn min_tof_for_fraction(r: f64, fraction: f64, params: &PhysicalParams) -> Result<f64> {
    params.validate()?;
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::invalid(format!("r must be >= 0, got {r}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    Ok((4.0 * r).exp() * (fraction / (1.0 - fraction)).sqrt() / params.omega0)
}

/// Normalised variance of the TOF velocity estimate predicted from a state
/// by direct propagation: free flight for `t_tof`, then the second moment
/// of the recapture amplitude divided by `(omega0 t_tof)^2`.  For zero-mean
/// states this equals `analytic_variance` exactly (heating off); with
/// heating it is the exact covariance-level prediction the Monte Carlo
/// should reproduce.
pub fn propagated_tof_variance(state: &GaussianState) -> f64 {
    let params = *state.params();
    let flown = state
        .free_flight(params.t_tof)
        .expect("t_tof validated positive");
    let w = params.omega0_t_tof();
    (flown.cov().zz + flown.cov().pp) / (w * w)
}

/// Numerically optimise the lowered-frequency segment duration `t1` to
/// minimise the TOF-measured variance right at release (hold = 0).  The
/// canonical quarter period minimises the in-trap momentum variance; the
/// measured variance also carries the position and cross terms, so under
/// heating or large `1/w` corrections the optimum shifts slightly.  Golden
/// -section search over one half period of the lowered trap.
pub fn optimize_t1(
    initial: &GaussianState,
    schedule: &ProtocolSchedule,
) -> Result<f64> {
    let objective = |t1: f64| -> Result<f64> {
        let mut s = initial.evolve_harmonic(schedule.omega1, t1)?;
        if schedule.heating_enabled {
            s = s.add_heating(t1)?;
        }
        Ok(propagated_tof_variance(&s))
    };
    let (mut a, mut b) = (0.0_f64, PI / schedule.omega1);
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = objective(c)?;
    let mut fd = objective(d)?;
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d)?;
        }
        if (b - a).abs() < 1e-15 * (PI / schedule.omega1) + 1e-18 {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use crate::phasespace::GaussianState;

    fn params() -> PhysicalParams {
        PhysicalParams::default()
    }

    #[test]
    fn intensity_ratio_sets_r() {
        // omega1/omega0 = sqrt(I1/I0) means r = ln(I0/I1)/4.
        assert_relative_eq!(
            squeezing_parameter_from_intensity(1.0, (-4.0_f64).exp()).unwrap(),
            1.0,
            max_relative = 1e-12
        );
        assert_eq!(squeezing_parameter_from_intensity(1.0, 1.0).unwrap(), 0.0);
        assert!(squeezing_parameter_from_intensity(1.0, 2.0).is_err());
        assert!(squeezing_parameter_from_intensity(0.0, 1.0).is_err());
    }

    #[test]
    fn canonical_schedule_durations() {
        let s = ProtocolSchedule::canonical(&params(), 0.85, 1).unwrap();
        // omega1/2π = 252 kHz · e^{-1.7} ≈ 46.04 kHz, so a quarter period
        // is ≈ 5.43 us; one native half period is ≈ 1.984 us.
        assert_relative_eq!(s.t1, 5.4305e-6, max_relative = 1e-4);
        assert_relative_eq!(s.hold, 1.98413e-6, max_relative = 1e-5);
        assert!(ProtocolSchedule::canonical(&params(), -0.1, 1).is_err());
        assert!(s.with_hold(-1.0).is_err());
    }

    #[test]
    fn protocol_squeezes_thermal_state() {
        let p = params();
        let initial = GaussianState::thermal_state(p, 0.98).unwrap();
        let schedule = ProtocolSchedule::canonical(&p, 0.85, 1).unwrap();
        let out = run_protocol(&initial, &schedule).unwrap();
        // diag(2.96 e^{3.4}, 2.96 e^{-3.4}); the half-period hold only flips
        // signs of the mean, not the covariance.
        assert_relative_eq!(out.cov().zz, 2.96 * 3.4_f64.exp(), max_relative = 1e-10);
        assert_relative_eq!(out.cov().pp, 2.96 * (-3.4_f64).exp(), max_relative = 1e-10);
        assert_abs_diff_eq!(out.cov().zp, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn analytic_variance_without_squeezing_is_flat() {
        let p = params();
        let w = p.omega0_t_tof();
        for hold in [0.0, 0.7e-6, 1.3e-6, 3.1e-6] {
            let pred = analytic_variance(0.0, hold, &p, 1.0).unwrap();
            assert_relative_eq!(pred.v_tilde, 1.0 + 2.0 / (w * w), max_relative = 1e-12);
        }
    }

    #[test]
    fn envelope_values_at_nominal_operating_point() {
        let p = params();
        let pred = analytic_variance(0.85, 0.0, &p, 2.96).unwrap();
        // v1 = 2.96 (e^{-3.4} + e^{3.4}/w^2) with w = 80.7515.
        assert_relative_eq!(pred.v1_tilde, 0.1123865, max_relative = 1e-5);
        assert_relative_eq!(pred.v2_tilde, 2.96 * 3.4_f64.exp() * (1.0 + 1.0 / (p.omega0_t_tof().powi(2))), max_relative = 1e-12);
        assert!(pred.v1_tilde <= pred.v2_tilde);
        // Envelope product can only exceed the initial uncertainty product.
        assert!(pred.v1_tilde * pred.v2_tilde >= 2.96 * 2.96);
    }

    #[test]
    fn variance_is_periodic_in_the_hold() {
        let p = params();
        let period = PI / p.omega0;
        for k in 0..4 {
            let a = analytic_variance(0.73, 0.3e-6 + k as f64 * period, &p, 2.96).unwrap();
            let b = analytic_variance(0.73, 0.3e-6, &p, 2.96).unwrap();
            assert_relative_eq!(a.v_tilde, b.v_tilde, max_relative = 1e-9);
        }
        // At exact half-period multiples the variance equals its hold = 0
        // value independent of the multiple.
        let base = analytic_variance(0.85, 0.0, &p, 2.96).unwrap().v_tilde;
        for n in 1..6 {
            let v = analytic_variance(0.85, n as f64 * period, &p, 2.96)
                .unwrap()
                .v_tilde;
            assert_relative_eq!(v, base, max_relative = 1e-9);
        }
    }

    #[test]
    fn analytic_matches_symplectic_propagation() {
        // The closed form and direct covariance propagation must agree to
        // float precision; this ties the Monte Carlo observable to the
        // formula it is benchmarked against.
        let p = params();
        let initial = GaussianState::thermal_state(p, 0.98).unwrap();
        for r in [0.0, 0.2, 0.4, 0.58, 0.73, 0.85, 1.2] {
            let schedule = ProtocolSchedule::canonical(&p, r, 0).unwrap();
            for i in 0..17 {
                let hold = i as f64 * 0.25e-6;
                let out =
                    run_protocol(&initial, &schedule.with_hold(hold).unwrap()).unwrap();
                let propagated = propagated_tof_variance(&out);
                let analytic = analytic_variance(r, hold, &p, 2.96).unwrap().v_tilde;
                assert_relative_eq!(propagated, analytic, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn fraction_and_minimum_flight_time() {
        let p = params();
        let w = p.omega0_t_tof();
        // Nominal operating point: 51 us flight at r = 0.85 keeps ~88% of
        // the minimum variance in the squeezed quadrature.
        assert_relative_eq!(velocity_fraction(0.85, w), 0.87898, max_relative = 1e-4);

        // Closed-form inversion vs an independent bisection oracle.
        for (r, f) in [(0.85, 0.87), (0.4, 0.5), (0.0, 0.5), (0.73, 0.9)] {
            let t = min_tof_for_fraction(r, f, &p).unwrap();
            let mut lo = 1e-9;
            let mut hi = 1.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if velocity_fraction(r, p.omega0 * mid) < f {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert_relative_eq!(t, 0.5 * (lo + hi), max_relative = 1e-9);
        }
        // r = 0 at fraction 1/2 degenerates to t = 1/omega0.
        assert_relative_eq!(
            min_tof_for_fraction(0.0, 0.5, &p).unwrap(),
            1.0 / p.omega0,
            max_relative = 1e-12
        );
        // At the nominal squeeze, reaching 87% needs ≈ 49.0 us.
        assert_relative_eq!(
            min_tof_for_fraction(0.85, 0.87, &p).unwrap(),
            4.8957e-5,
            max_relative = 1e-4
        );
        assert!(min_tof_for_fraction(0.85, 1.0, &p).is_err());
    }

    #[test]
    fn t1_optimizer_stays_near_quarter_period() {
        let p = params();
        let initial = GaussianState::thermal_state(p, 0.98).unwrap();
        let schedule = ProtocolSchedule::canonical(&p, 0.85, 0).unwrap();
        let best = optimize_t1(&initial, &schedule).unwrap();
        let quarter = PI / (2.0 * schedule.omega1);
        // The optimum shifts from the quarter period only by the small
        // 1/(omega0 t_tof) release corrections.
        assert_relative_eq!(best, quarter, max_relative = 0.05);
        let at = |t1: f64| {
            let s = initial.evolve_harmonic(schedule.omega1, t1).unwrap();
            propagated_tof_variance(&s)
        };
        assert!(at(best) <= at(quarter) + 1e-15);
    }
}
