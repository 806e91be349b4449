//! Signal analysis: band-pass filtering of photodetector traces, sinusoid
//! and histogram fits, and the sweep-level estimators that turn measured
//! velocity variances into squeezing numbers.

use crate::constants;
use crate::error::{Error, Result};
use crate::fitting::{self, LsqSolution};
use crate::phasespace::{NormalizedVariance, PhysicalParams};
use crate::trace::Trace;

/// Linear-phase FIR band-pass specification.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FilterSpec {
    /// Filter order; the filter has `order + 1` taps.  Must be even so the
    /// group delay is an integer number of samples.
    pub order: usize,
    /// Pass-band centre frequency, Hz.
    pub center: f64,
    /// Pass-band width, Hz.
    pub bandwidth: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            order: 10,
            center: 253e3,
            bandwidth: 20e3,
        }
    }
}

impl FilterSpec {
    fn validate(&self, sample_rate: f64) -> Result<()> {
        if self.order < 2 || self.order % 2 != 0 {
            return Err(Error::invalid("filter order must be even and >= 2"));
        }
        if !(self.bandwidth > 0.0) || !(self.center > self.bandwidth / 2.0) {
            return Err(Error::invalid(
                "filter needs 0 < bandwidth/2 < center so the DC notch survives",
            ));
        }
        if self.center + self.bandwidth / 2.0 >= sample_rate / 2.0 {
            return Err(Error::invalid("filter pass-band exceeds Nyquist"));
        }
        Ok(())
    }
}

/// Design the taps for the band-pass of `spec` at the given sample rate:
/// a Hamming-windowed difference of sinc low-passes, forced to a hard DC
/// null (taps sum to zero) and unit response at the centre frequency.
pub fn design_bandpass_taps(spec: &FilterSpec, sample_rate: f64) -> Result<Vec<f64>> {
    spec.validate(sample_rate)?;
    let m = spec.order as f64;
    let f_lo = (spec.center - spec.bandwidth / 2.0) / sample_rate;
    let f_hi = (spec.center + spec.bandwidth / 2.0) / sample_rate;
    let mut taps: Vec<f64> = (0..=spec.order)
        .map(|k| {
            let t = k as f64 - m / 2.0;
            let ideal = if t == 0.0 {
                2.0 * (f_hi - f_lo)
            } else {
                ((std::f64::consts::TAU * f_hi * t).sin()
                    - (std::f64::consts::TAU * f_lo * t).sin())
                    / (std::f64::consts::PI * t)
            };
            let window = 0.54 - 0.46 * (std::f64::consts::TAU * k as f64 / m).cos();
            ideal * window
        })
        .collect();
    // Hard DC null: a zero-sum kernel rejects static offsets exactly.
    let mean = taps.iter().sum::<f64>() / taps.len() as f64;
    for t in &mut taps {
        *t -= mean;
    }
    // Unit (and zero-phase) gain at the centre frequency.  The kernel is
    // symmetric, so the delay-compensated response is purely real.
    let gain = zero_phase_response(&taps, spec.center, sample_rate);
    if gain.abs() < 1e-12 {
        return Err(Error::degenerate("filter has no gain at its centre"));
    }
    for t in &mut taps {
        *t /= gain;
    }
    Ok(taps)
}

/// Delay-compensated (real) frequency response of a symmetric kernel.
fn zero_phase_response(taps: &[f64], freq: f64, sample_rate: f64) -> f64 {
    let m = (taps.len() - 1) as f64;
    taps.iter()
        .enumerate()
        .map(|(k, &t)| t * (std::f64::consts::TAU * freq / sample_rate * (k as f64 - m / 2.0)).cos())
        .sum()
}

/// Magnitude response of a kernel at one frequency.
pub fn frequency_response(taps: &[f64], freq: f64, sample_rate: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (k, &t) in taps.iter().enumerate() {
        let phi = std::f64::consts::TAU * freq / sample_rate * k as f64;
        re += t * phi.cos();
        im -= t * phi.sin();
    }
    re.hypot(im)
}

/// Filter a trace.  The convolution keeps only fully-overlapped samples and
/// advances `start_time` by the group delay, so output samples stay aligned
/// with the input time axis.
pub fn fir_bandpass(trace: &Trace, spec: &FilterSpec) -> Result<Trace> {
    let taps = design_bandpass_taps(spec, trace.sample_rate)?;
    if trace.len() <= spec.order {
        return Err(Error::insufficient(format!(
            "trace of {} samples is shorter than the {}-tap filter",
            trace.len(),
            taps.len()
        )));
    }
    let n_out = trace.len() - spec.order;
    let samples: Vec<f64> = (0..n_out)
        .map(|j| {
            taps.iter()
                .enumerate()
                .map(|(k, &t)| t * trace.samples[j + k])
                .sum()
        })
        .collect();
    let dt = 1.0 / trace.sample_rate;
    Ok(Trace {
        sample_rate: trace.sample_rate,
        start_time: trace.start_time + (spec.order / 2) as f64 * dt,
        samples,
    })
}

/// Result of a damped sinusoid-free oscillation fit `A sin(2π f t + φ) + c`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SinusoidFit {
    /// Oscillation amplitude, trace units; always >= 0.
    pub amplitude: f64,
    pub amplitude_std_error: f64,
    /// Fitted frequency, Hz.
    pub frequency: f64,
    /// Phase at t = 0, rad in [0, 2π).
    pub phase: f64,
    /// Constant offset, trace units.
    pub offset: f64,
    pub residual_rms: f64,
}

/// Fit `A sin(2π f t + φ) + c` to a trace.  The trace must cover at least
/// five periods of the guess frequency.  Times are absolute (including
/// `start_time`), so the phase refers to t = 0.
pub fn fit_sinusoid(trace: &Trace, frequency_guess: f64) -> Result<SinusoidFit> {
    if !(frequency_guess > 0.0) {
        return Err(Error::invalid("frequency guess must be > 0"));
    }
    if trace.sample_rate <= 2.0 * frequency_guess {
        return Err(Error::invalid("trace under-samples the guess frequency"));
    }
    if trace.duration() < 5.0 / frequency_guess {
        return Err(Error::insufficient(format!(
            "trace covers {:.2} periods; need at least 5",
            trace.duration() * frequency_guess
        )));
    }
    let times: Vec<f64> = (0..trace.len()).map(|i| trace.time_at(i)).collect();

    // An in-phase/quadrature linear fit at the guess frequency seeds the
    // nonlinear refinement.  When the guess is off by more than a Fourier
    // resolution element the quadratures can average to zero over a beat
    // period and strand the refinement at zero amplitude, so if the first
    // fit leaves most of the signal unexplained, rescan a small frequency
    // neighbourhood for a better starting point.
    let quadrature_fit = |f: f64| -> Result<LsqSolution> {
        let design: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| {
                let th = std::f64::consts::TAU * f * t;
                vec![th.sin(), th.cos(), 1.0]
            })
            .collect();
        fitting::linear_fit(&design, &trace.samples, None)
    };
    let direct = quadrature_fit(frequency_guess)?;
    let mut init = vec![direct.params[0], direct.params[1], frequency_guess, direct.params[2]];
    if direct.params[0].hypot(direct.params[1]) < direct.residual_rms {
        let resolution = 1.0 / trace.duration();
        let half_span = (0.02 * frequency_guess).max(3.0 * resolution);
        let step = 0.4 * resolution;
        let n_steps = (half_span / step).ceil() as i64;
        let mut best = direct.residual_rms;
        for k in -n_steps..=n_steps {
            let f = frequency_guess + k as f64 * step;
            if k == 0 || !(f > 0.0) || 2.0 * f >= trace.sample_rate {
                continue;
            }
            let lin = quadrature_fit(f)?;
            if lin.residual_rms < best {
                best = lin.residual_rms;
                init = vec![lin.params[0], lin.params[1], f, lin.params[2]];
            }
        }
    }

    let model = |p: &[f64], t: f64| {
        let th = std::f64::consts::TAU * p[2] * t;
        p[0] * th.sin() + p[1] * th.cos() + p[3]
    };
    let jacobian = |p: &[f64], t: f64| {
        let th = std::f64::consts::TAU * p[2] * t;
        let (s, c) = th.sin_cos();
        vec![
            s,
            c,
            std::f64::consts::TAU * t * (p[0] * c - p[1] * s),
            1.0,
        ]
    };
    let sol = fitting::levenberg_marquardt(model, jacobian, &times, &trace.samples, None, &init, 200)?;
    let (a, b) = (sol.params[0], sol.params[1]);
    let amplitude = a.hypot(b);
    let amp_var = if amplitude > 0.0 {
        (a * a * sol.covariance[0][0]
            + b * b * sol.covariance[1][1]
            + 2.0 * a * b * sol.covariance[0][1])
            / (amplitude * amplitude)
    } else {
        sol.covariance[0][0].max(sol.covariance[1][1])
    };
    Ok(SinusoidFit {
        amplitude,
        amplitude_std_error: amp_var.max(0.0).sqrt(),
        frequency: sol.params[2],
        phase: b.atan2(a).rem_euclid(std::f64::consts::TAU),
        offset: sol.params[3],
        residual_rms: sol.residual_rms,
    })
}

/// Equal-width histogram on a grid anchored at the sample mean.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Histogram {
    pub centers: Vec<f64>,
    pub counts: Vec<f64>,
    pub bin_width: f64,
}

impl Histogram {
    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0.0).count()
    }
}

/// Histogram a velocity sample with bin width `1.75 σ / n^(1/3)` on a grid
/// of centres `mean + j·h`.  Every observation lands in a bin, so the
/// counts sum to the sample size.
pub fn velocity_histogram(velocities: &[f64]) -> Result<Histogram> {
    let n = velocities.len();
    if n < 10 {
        return Err(Error::insufficient(format!(
            "{n} velocities are too few to histogram"
        )));
    }
    let mean = velocities.iter().sum::<f64>() / n as f64;
    let var = velocities.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(Error::degenerate("velocity sample has zero spread"));
    }
    let h = 1.75 * sigma / (n as f64).cbrt();
    let index = |v: f64| ((v - mean) / h).round() as i64;
    let (mut j_min, mut j_max) = (i64::MAX, i64::MIN);
    for &v in velocities {
        let j = index(v);
        j_min = j_min.min(j);
        j_max = j_max.max(j);
    }
    let n_bins = (j_max - j_min + 1) as usize;
    let mut counts = vec![0.0; n_bins];
    for &v in velocities {
        counts[(index(v) - j_min) as usize] += 1.0;
    }
    let centers = (j_min..=j_max).map(|j| mean + j as f64 * h).collect();
    Ok(Histogram {
        centers,
        counts,
        bin_width: h,
    })
}

/// A fitted parameter set with names, errors, and the full covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<&'static str>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub residual_rms: f64,
    /// Inputs discarded before the fit (e.g. traces whose oscillation fit
    /// failed).
    pub n_dropped: usize,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|&n| n == name)
            .map(|i| self.values[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|&n| n == name)
            .map(|i| self.std_errors[i])
    }

    fn from_solution(names: Vec<&'static str>, sol: LsqSolution, n_dropped: usize) -> FitResult {
        let std_errors = sol.std_errors();
        FitResult {
            names,
            values: sol.params,
            std_errors,
            covariance: sol.covariance,
            residual_rms: sol.residual_rms,
            n_dropped,
        }
    }
}

struct NamedValues<'a> {
    names: &'a [&'static str],
    values: &'a [f64],
}

impl serde::Serialize for NamedValues<'_> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(self.names.len()))?;
        for (name, value) in self.names.iter().zip(self.values) {
            map.serialize_entry(name, value)?;
        }
        map.end()
    }
}

impl serde::Serialize for FitResult {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(5))?;
        map.serialize_entry(
            "parameters",
            &NamedValues {
                names: &self.names,
                values: &self.values,
            },
        )?;
        map.serialize_entry(
            "errors",
            &NamedValues {
                names: &self.names,
                values: &self.std_errors,
            },
        )?;
        map.serialize_entry("covariance", &self.covariance)?;
        map.serialize_entry("residual_rms", &self.residual_rms)?;
        map.serialize_entry("n_dropped", &self.n_dropped)?;
        map.end()
    }
}

/// Fit a Gaussian `amplitude · exp(-(v - v0)² / (2 dv²))` to a velocity
/// histogram.  Parameter names: `amplitude`, `v0`, `dv`.
pub fn fit_velocity_distribution(hist: &Histogram) -> Result<FitResult> {
    if hist.occupied_bins() < 5 {
        return Err(Error::insufficient(format!(
            "{} occupied bins are too few for a width fit",
            hist.occupied_bins()
        )));
    }
    let total: f64 = hist.counts.iter().sum();
    let mean: f64 = hist
        .centers
        .iter()
        .zip(&hist.counts)
        .map(|(c, n)| c * n)
        .sum::<f64>()
        / total;
    let var: f64 = hist
        .centers
        .iter()
        .zip(&hist.counts)
        .map(|(c, n)| n * (c - mean) * (c - mean))
        .sum::<f64>()
        / total;
    let peak = hist.counts.iter().cloned().fold(0.0_f64, f64::max);
    let init = vec![peak, mean, var.sqrt().max(hist.bin_width)];

    let model = |p: &[f64], x: f64| {
        let u = (x - p[1]) / p[2];
        p[0] * (-0.5 * u * u).exp()
    };
    let jacobian = |p: &[f64], x: f64| {
        let u = (x - p[1]) / p[2];
        let g = (-0.5 * u * u).exp();
        vec![g, p[0] * g * u / p[2], p[0] * g * u * u / p[2]]
    };
    let mut sol =
        fitting::levenberg_marquardt(model, jacobian, &hist.centers, &hist.counts, None, &init, 200)?;
    sol.params[2] = sol.params[2].abs();
    // Counting noise varies strongly between the core and the tails of the
    // histogram, so the unweighted covariance misstates the parameter
    // errors; replace it with the scatter-robust sandwich estimate.
    let design: Vec<Vec<f64>> = hist.centers.iter().map(|&c| jacobian(&sol.params, c)).collect();
    let residuals: Vec<f64> = hist
        .centers
        .iter()
        .zip(&hist.counts)
        .map(|(&c, &n)| n - model(&sol.params, c))
        .collect();
    sol.covariance = fitting::sandwich_covariance(&design, &residuals)?;
    Ok(FitResult::from_solution(vec!["amplitude", "v0", "dv"], sol, 0))
}

/// Histogram a velocity sample, fit its width, and express the variance in
/// units of the ground-state velocity variance.  Returns the variance and
/// the underlying distribution fit.
pub fn variance_from_velocities(
    velocities: &[f64],
    params: &PhysicalParams,
) -> Result<(NormalizedVariance, FitResult)> {
    let hist = velocity_histogram(velocities)?;
    let fit = fit_velocity_distribution(&hist)?;
    let dv = fit.value("dv").unwrap();
    let dv_err = fit.std_error("dv").unwrap();
    let v0 = params.ground_velocity_variance();
    Ok((
        NormalizedVariance {
            value: dv * dv / v0,
            std_error: 2.0 * dv.abs() * dv_err / v0,
        },
        fit,
    ))
}

/// One point of a variance-vs-hold-time sweep.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct VariancePoint {
    /// Hold duration at the trap frequency before release, s.
    pub hold: f64,
    /// Measured normalised velocity variance.
    pub value: f64,
    /// One-sigma uncertainty of `value`; zero means unweighted.
    pub std_error: f64,
}

/// Oscillation model for the variance-vs-hold fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceModel {
    /// `v1 cos²θ + v2 sin²θ` — envelope extremes only.
    Simplified,
    /// Adds a `sin 2θ` term that captures position-velocity correlation at
    /// finite flight time.
    WithCrossTerm,
}

/// Fit the oscillating variance `v(θ = ω0·hold)`.  Variance amplitudes are
/// clamped at zero when the unconstrained optimum goes negative.
/// Parameter names: `v1_tilde`, `v2_tilde` and, for the extended model,
/// `cross`.
pub fn fit_variance_evolution(
    points: &[VariancePoint],
    omega0: f64,
    model: VarianceModel,
) -> Result<FitResult> {
    if !(omega0 > 0.0) {
        return Err(Error::invalid("omega0 must be > 0"));
    }
    let n_params = match model {
        VarianceModel::Simplified => 2,
        VarianceModel::WithCrossTerm => 3,
    };
    if points.len() < n_params + 2 {
        return Err(Error::insufficient(format!(
            "{} points are too few for a {}-parameter variance fit",
            points.len(),
            n_params
        )));
    }
    let span = points.iter().map(|p| p.hold).fold(f64::NEG_INFINITY, f64::max)
        - points.iter().map(|p| p.hold).fold(f64::INFINITY, f64::min);
    if span * omega0 < std::f64::consts::FRAC_PI_2 {
        return Err(Error::insufficient(
            "hold sweep must span at least a quarter oscillation period",
        ));
    }
    let design: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let th = omega0 * p.hold;
            let (s, c) = th.sin_cos();
            let mut row = vec![c * c, s * s];
            if n_params == 3 {
                row.push((2.0 * th).sin());
            }
            row
        })
        .collect();
    let y: Vec<f64> = points.iter().map(|p| p.value).collect();
    let sigma = collect_sigma(points.iter().map(|p| p.std_error))?;
    let sol = solve_clamped(&design, &y, sigma.as_deref(), &[0, 1])?;
    let names = match model {
        VarianceModel::Simplified => vec!["v1_tilde", "v2_tilde"],
        VarianceModel::WithCrossTerm => vec!["v1_tilde", "v2_tilde", "cross"],
    };
    Ok(FitResult::from_solution(names, sol, 0))
}

/// One point of a variance-vs-squeezing-parameter sweep.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SqueezePoint {
    pub r: f64,
    pub value: f64,
    /// One-sigma uncertainty of `value`; zero means unweighted.
    pub std_error: f64,
}

/// Which envelope branch of the variance oscillation a sweep follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Squeezed quadrature: variance shrinks as `e^(-4r)`.
    Minima,
    /// Anti-squeezed quadrature: variance grows as `e^(4r)`.
    Maxima,
}

/// Fit `v(r) = v_n + v_ini · e^(∓4r)` across squeezing strengths; `v_n` is
/// the r-independent noise floor.  Pass `fixed_floor` to freeze `v_n` and
/// fit the initial variance alone.  Parameter names: `v_n`, `v_ini`.
pub fn fit_r_dependence(
    points: &[SqueezePoint],
    branch: Branch,
    fixed_floor: Option<f64>,
) -> Result<FitResult> {
    let free_params = if fixed_floor.is_some() { 1 } else { 2 };
    if points.len() < free_params + 1 {
        return Err(Error::insufficient(format!(
            "{} points are too few for the r-dependence fit",
            points.len()
        )));
    }
    if points.iter().any(|p| p.r < 0.0) {
        return Err(Error::invalid("squeezing parameters must be >= 0"));
    }
    let sign = match branch {
        Branch::Minima => -4.0,
        Branch::Maxima => 4.0,
    };
    let sigma = collect_sigma(points.iter().map(|p| p.std_error))?;
    match fixed_floor {
        None => {
            let design: Vec<Vec<f64>> = points
                .iter()
                .map(|p| vec![1.0, (sign * p.r).exp()])
                .collect();
            let y: Vec<f64> = points.iter().map(|p| p.value).collect();
            let sol = fitting::linear_fit(&design, &y, sigma.as_deref())?;
            Ok(FitResult::from_solution(vec!["v_n", "v_ini"], sol, 0))
        }
        Some(floor) => {
            if floor < 0.0 {
                return Err(Error::invalid("noise floor must be >= 0"));
            }
            let design: Vec<Vec<f64>> = points
                .iter()
                .map(|p| vec![(sign * p.r).exp()])
                .collect();
            let y: Vec<f64> = points.iter().map(|p| p.value - floor).collect();
            let sol = fitting::linear_fit(&design, &y, sigma.as_deref())?;
            let var_k = sol.covariance[0][0];
            Ok(FitResult {
                names: vec!["v_n", "v_ini"],
                values: vec![floor, sol.params[0]],
                std_errors: vec![0.0, var_k.max(0.0).sqrt()],
                covariance: vec![vec![0.0, 0.0], vec![0.0, var_k]],
                residual_rms: sol.residual_rms,
                n_dropped: 0,
            })
        }
    }
}

/// Variance relative to the ground state, in decibel: `10 log10(v)`.
/// Negative values mean squeezing below the ground-state width.
pub fn squeezing_db(v_tilde: f64) -> Result<f64> {
    if !(v_tilde > 0.0) {
        return Err(Error::invalid("variance must be > 0 to express in dB"));
    }
    Ok(10.0 * v_tilde.log10())
}

/// Thermal occupation implied by a velocity width `dv` (m/s):
/// `n = m·dv²/(ħω0) - 1/2`.
pub fn occupation_from_width(dv: f64, params: &PhysicalParams) -> Result<f64> {
    if !(dv > 0.0) {
        return Err(Error::invalid("velocity width must be > 0"));
    }
    Ok(params.mass * dv * dv / (constants::HBAR * params.omega0) - 0.5)
}

/// Extract signed velocities from photodetector traces: band-pass, fit the
/// recapture oscillation, convert the amplitude through the detector
/// calibration and flight time, and take the sign from the oscillation
/// phase.  Traces whose fit fails are dropped; more than 5% dropped aborts.
pub fn velocities_from_traces(
    traces: &[Trace],
    filter: &FilterSpec,
    params: &PhysicalParams,
    calibration_volts_per_meter: f64,
) -> Result<(Vec<f64>, usize)> {
    if traces.is_empty() {
        return Err(Error::insufficient("no traces to analyse"));
    }
    if !(calibration_volts_per_meter > 0.0) {
        return Err(Error::invalid("calibration must be > 0"));
    }
    let f0 = params.omega0 / std::f64::consts::TAU;
    let mut velocities = Vec::with_capacity(traces.len());
    let mut dropped = 0usize;
    for trace in traces {
        let fit = fir_bandpass(trace, filter).and_then(|f| fit_sinusoid(&f, f0));
        match fit {
            Ok(s) => {
                let speed = s.amplitude / (calibration_volts_per_meter * params.t_tof);
                let sign = if s.phase.sin() >= 0.0 { 1.0 } else { -1.0 };
                velocities.push(sign * speed);
            }
            Err(_) => dropped += 1,
        }
    }
    let total = traces.len();
    if dropped * 20 > total {
        return Err(Error::TooManyDropped { dropped, total });
    }
    Ok((velocities, dropped))
}

/// Uncertainties for a weighted fit: all positive gives weights, all zero
/// gives an unweighted fit, a mixture is rejected.
fn collect_sigma<I: Iterator<Item = f64>>(errors: I) -> Result<Option<Vec<f64>>> {
    let sigma: Vec<f64> = errors.collect();
    if sigma.iter().all(|&s| s > 0.0) {
        Ok(Some(sigma))
    } else if sigma.iter().all(|&s| s == 0.0) {
        Ok(None)
    } else {
        Err(Error::invalid(
            "point uncertainties must be all positive or all zero",
        ))
    }
}

/// Weighted least squares with non-negativity on the columns listed in
/// `nonnegative`: when an unconstrained amplitude comes out negative it is
/// pinned at zero and the remaining columns are refit.
fn solve_clamped(
    design: &[Vec<f64>],
    y: &[f64],
    sigma: Option<&[f64]>,
    nonnegative: &[usize],
) -> Result<LsqSolution> {
    let sol = fitting::linear_fit(design, y, sigma)?;
    let mut fixed: Vec<usize> = Vec::new();
    for &idx in nonnegative {
        if sol.params[idx] < 0.0 {
            fixed.push(idx);
        }
    }
    if fixed.is_empty() {
        return Ok(sol);
    }
    let p = design[0].len();
    let keep: Vec<usize> = (0..p).filter(|i| !fixed.contains(i)).collect();
    if keep.is_empty() {
        return Err(Error::degenerate(
            "all variance amplitudes pinned at zero; data is not a variance sweep",
        ));
    }
    let reduced: Vec<Vec<f64>> = design
        .iter()
        .map(|row| keep.iter().map(|&i| row[i]).collect())
        .collect();
    let red = fitting::linear_fit(&reduced, y, sigma)?;
    let mut params = vec![0.0; p];
    let mut covariance = vec![vec![0.0; p]; p];
    for (rj, &j) in keep.iter().enumerate() {
        params[j] = red.params[rj];
        for (ri, &i) in keep.iter().enumerate() {
            covariance[j][i] = red.covariance[rj][ri];
        }
    }
    Ok(LsqSolution {
        params,
        covariance,
        residual_rms: red.residual_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use crate::measurement::{ensemble, NoiseSpec};
    use crate::phasespace::GaussianState;
    use crate::protocol::ProtocolSchedule;

    fn params() -> PhysicalParams {
        PhysicalParams::default()
    }

    #[test]
    fn bandpass_kernel_is_symmetric_with_pinned_gains() {
        let spec = FilterSpec::default();
        let fs = 3.2e6;
        let taps = design_bandpass_taps(&spec, fs).unwrap();
        assert_eq!(taps.len(), spec.order + 1);
        for k in 0..taps.len() {
            assert_abs_diff_eq!(taps[k], taps[spec.order - k], epsilon = 1e-15);
        }
        // Zero-sum kernel kills DC exactly; centre gain is pinned to one.
        assert!(frequency_response(&taps, 0.0, fs) < 1e-12);
        assert_relative_eq!(frequency_response(&taps, spec.center, fs), 1.0, max_relative = 1e-12);
        // Low-frequency interference is attenuated.
        assert!(frequency_response(&taps, 5e3, fs) < 0.2);
    }

    #[test]
    fn filtering_preserves_a_centre_band_tone() {
        let spec = FilterSpec::default();
        let fs = 3.2e6;
        let f = spec.center;
        let n = 3200;
        let trace = Trace {
            sample_rate: fs,
            start_time: 0.0,
            samples: (0..n)
                .map(|i| (std::f64::consts::TAU * f * i as f64 / fs + 0.6).sin())
                .collect(),
        };
        let out = fir_bandpass(&trace, &spec).unwrap();
        assert_eq!(out.len(), n - spec.order);
        assert_relative_eq!(out.start_time, 5.0 / fs, max_relative = 1e-12);
        // Group-delay compensation keeps the tone aligned with absolute time.
        for j in [0, 100, 1500, out.len() - 1] {
            let t = out.time_at(j);
            let expected = (std::f64::consts::TAU * f * t + 0.6).sin();
            assert_abs_diff_eq!(out.samples[j], expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn filter_rejects_bad_setups() {
        let fs = 3.2e6;
        assert!(design_bandpass_taps(
            &FilterSpec { order: 7, ..FilterSpec::default() },
            fs
        )
        .is_err());
        assert!(design_bandpass_taps(
            &FilterSpec { center: 5e3, bandwidth: 20e3, ..FilterSpec::default() },
            fs
        )
        .is_err());
        assert!(design_bandpass_taps(
            &FilterSpec { center: 1.7e6, ..FilterSpec::default() },
            fs
        )
        .is_err());
        let short = Trace {
            sample_rate: fs,
            start_time: 0.0,
            samples: vec![0.0; 8],
        };
        assert!(fir_bandpass(&short, &FilterSpec::default()).is_err());
    }

    #[test]
    fn sinusoid_fit_recovers_exact_parameters() {
        let fs = 3.2e6;
        let (a, b, f, c) = (2.0, -1.0, 250e3, 0.3);
        let trace = Trace {
            sample_rate: fs,
            start_time: 0.0,
            samples: (0..3200)
                .map(|i| {
                    let th = std::f64::consts::TAU * f * i as f64 / fs;
                    a * th.sin() + b * th.cos() + c
                })
                .collect(),
        };
        let fit = fit_sinusoid(&trace, 251e3).unwrap();
        assert_relative_eq!(fit.amplitude, (5.0_f64).sqrt(), max_relative = 1e-7);
        assert_relative_eq!(fit.frequency, f, max_relative = 1e-9);
        assert_relative_eq!(fit.offset, c, max_relative = 1e-6);
        let expected_phase = (-1.0_f64).atan2(2.0).rem_euclid(std::f64::consts::TAU);
        assert_abs_diff_eq!(fit.phase, expected_phase, epsilon = 1e-7);
        assert!(fit.residual_rms < 1e-9);
    }

    #[test]
    fn sinusoid_fit_needs_enough_periods() {
        let trace = Trace {
            sample_rate: 3.2e6,
            start_time: 0.0,
            samples: vec![0.0; 40], // 12.5 us: ~3 periods at 252 kHz
        };
        assert!(matches!(
            fit_sinusoid(&trace, 252e3),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn histogram_uses_the_cube_root_width_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 4000;
        let sigma_true = 3.0e-6;
        let velocities: Vec<f64> = (0..n)
            .map(|_| sigma_true * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let hist = velocity_histogram(&velocities).unwrap();
        let mean = velocities.iter().sum::<f64>() / n as f64;
        let var =
            velocities.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let expected_h = 1.75 * var.sqrt() / (n as f64).cbrt();
        assert_relative_eq!(hist.bin_width, expected_h, max_relative = 1e-12);
        assert_abs_diff_eq!(hist.counts.iter().sum::<f64>(), n as f64, epsilon = 0.0);
        // The grid is anchored on the sample mean.
        let nearest = hist
            .centers
            .iter()
            .map(|c| (c - mean).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(nearest < 1e-12 * sigma_true);
        for w in hist.centers.windows(2) {
            assert_relative_eq!(w[1] - w[0], expected_h, max_relative = 1e-9);
        }
        assert!(velocity_histogram(&velocities[..5]).is_err());
        assert!(velocity_histogram(&vec![1.0; 64]).is_err());
    }

    #[test]
    fn width_fit_recovers_a_gaussian_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let (mu, sigma) = (4.0e-7, 5.5e-6);
        let velocities: Vec<f64> = (0..n)
            .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let hist = velocity_histogram(&velocities).unwrap();
        let fit = fit_velocity_distribution(&hist).unwrap();
        assert_relative_eq!(fit.value("dv").unwrap(), sigma, max_relative = 0.02);
        assert_abs_diff_eq!(fit.value("v0").unwrap(), mu, epsilon = 3.0 * sigma / (n as f64).sqrt() * 3.0);
        assert!(fit.std_error("dv").unwrap() > 0.0);

        let (variance, _) = variance_from_velocities(&velocities, &params()).unwrap();
        let v0 = params().ground_velocity_variance();
        assert_relative_eq!(variance.value, sigma * sigma / v0, max_relative = 0.04);
        assert!(variance.std_error > 0.0);
    }

    #[test]
    fn fit_result_serialization_keeps_parameter_names() {
        let fit = FitResult {
            names: vec!["v_n", "v_ini"],
            values: vec![0.21, 2.96],
            std_errors: vec![0.01, 0.05],
            covariance: vec![vec![1e-4, 0.0], vec![0.0, 2.5e-3]],
            residual_rms: 0.3,
            n_dropped: 2,
        };
        let json: serde_json::Value = serde_json::from_str(&serde_json::to_string(&fit).unwrap()).unwrap();
        assert_eq!(json["parameters"]["v_n"], 0.21);
        assert_eq!(json["parameters"]["v_ini"], 2.96);
        assert_eq!(json["errors"]["v_ini"], 0.05);
        assert_eq!(json["n_dropped"], 2);
        assert_eq!(json["covariance"][1][1], 2.5e-3);
    }

    #[test]
    fn variance_evolution_fit_recovers_both_envelopes() {
        let p = params();
        let w = p.omega0_t_tof();
        let (v_ini, r) = (2.96, 0.85_f64);
        let v1 = v_ini * ((-4.0 * r).exp() + (4.0 * r).exp() / (w * w));
        let v2 = v_ini * ((4.0 * r).exp() + (-4.0 * r).exp() / (w * w));
        let cross = -2.0 * v_ini * (4.0 * r).sinh() / w;
        let points: Vec<VariancePoint> = (0..40)
            .map(|i| {
                let hold = i as f64 * 0.05e-6;
                let th = p.omega0 * hold;
                let value = v1 * th.cos().powi(2) + v2 * th.sin().powi(2) + cross * (2.0 * th).sin();
                VariancePoint { hold, value, std_error: 0.01 * value.max(0.1) }
            })
            .collect();
        let full = fit_variance_evolution(&points, p.omega0, VarianceModel::WithCrossTerm).unwrap();
        assert_relative_eq!(full.value("v1_tilde").unwrap(), v1, max_relative = 1e-9);
        assert_relative_eq!(full.value("v2_tilde").unwrap(), v2, max_relative = 1e-9);
        assert_relative_eq!(full.value("cross").unwrap(), cross, max_relative = 1e-9);
        // Dropping the correlation term leaves the large envelope intact and
        // mostly perturbs the small one.
        let simple = fit_variance_evolution(&points, p.omega0, VarianceModel::Simplified).unwrap();
        assert_relative_eq!(simple.value("v2_tilde").unwrap(), v2, max_relative = 0.05);
    }

    #[test]
    fn variance_fit_clamps_negative_amplitudes() {
        let p = params();
        let points: Vec<VariancePoint> = (0..24)
            .map(|i| {
                let hold = i as f64 * 0.1e-6;
                let th = p.omega0 * hold;
                let value = 5.0 * th.sin().powi(2) - 0.01 * th.cos().powi(2);
                VariancePoint { hold, value, std_error: 0.0 }
            })
            .collect();
        let fit = fit_variance_evolution(&points, p.omega0, VarianceModel::Simplified).unwrap();
        assert_eq!(fit.value("v1_tilde").unwrap(), 0.0);
        assert_eq!(fit.std_error("v1_tilde").unwrap(), 0.0);
        assert!(fit.value("v2_tilde").unwrap() > 4.9);
    }

    #[test]
    fn variance_fit_validates_its_inputs() {
        let p = params();
        let good = |hold: f64| VariancePoint { hold, value: 1.0, std_error: 0.1 };
        // Too few points.
        assert!(fit_variance_evolution(&[good(0.0), good(1e-6)], p.omega0, VarianceModel::Simplified).is_err());
        // Span shorter than a quarter period.
        let narrow: Vec<_> = (0..6).map(|i| good(i as f64 * 1e-8)).collect();
        assert!(fit_variance_evolution(&narrow, p.omega0, VarianceModel::Simplified).is_err());
        // Mixed weighting.
        let mut mixed: Vec<_> = (0..6).map(|i| good(i as f64 * 0.2e-6)).collect();
        mixed[3].std_error = 0.0;
        assert!(fit_variance_evolution(&mixed, p.omega0, VarianceModel::Simplified).is_err());
    }

    #[test]
    fn r_dependence_fit_recovers_floor_and_initial_variance() {
        let (v_n, v_ini) = (0.21, 2.96);
        let rs = [0.0, 0.2, 0.4, 0.58, 0.73, 0.85, 1.0];
        let minima: Vec<SqueezePoint> = rs
            .iter()
            .map(|&r| SqueezePoint { r, value: v_n + v_ini * (-4.0 * r).exp(), std_error: 0.01 })
            .collect();
        let fit = fit_r_dependence(&minima, Branch::Minima, None).unwrap();
        assert_relative_eq!(fit.value("v_n").unwrap(), v_n, max_relative = 1e-9);
        assert_relative_eq!(fit.value("v_ini").unwrap(), v_ini, max_relative = 1e-9);

        let maxima: Vec<SqueezePoint> = rs
            .iter()
            .map(|&r| SqueezePoint { r, value: v_n + v_ini * (4.0 * r).exp(), std_error: 0.0 })
            .collect();
        let fit = fit_r_dependence(&maxima, Branch::Maxima, None).unwrap();
        assert_relative_eq!(fit.value("v_ini").unwrap(), v_ini, max_relative = 1e-9);

        let fixed = fit_r_dependence(&minima, Branch::Minima, Some(v_n)).unwrap();
        assert_relative_eq!(fixed.value("v_ini").unwrap(), v_ini, max_relative = 1e-9);
        assert_eq!(fixed.value("v_n").unwrap(), v_n);
        assert_eq!(fixed.std_error("v_n").unwrap(), 0.0);
        assert!(fit_r_dependence(&minima[..2], Branch::Minima, None).is_err());
    }

    #[test]
    fn decibel_and_occupation_conversions() {
        assert_relative_eq!(
            squeezing_db(0.32).unwrap(),
            -4.948500216800943,
            max_relative = 1e-12
        );
        assert_eq!(squeezing_db(1.0).unwrap(), 0.0);
        assert!(squeezing_db(0.0).is_err());

        let p = params();
        let v0 = p.ground_velocity_variance();
        let n = occupation_from_width((2.96 * v0).sqrt(), &p).unwrap();
        assert_relative_eq!(n, 0.98, max_relative = 1e-10);
        let n0 = occupation_from_width(v0.sqrt(), &p).unwrap();
        assert_abs_diff_eq!(n0, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn trace_pipeline_matches_direct_velocities() {
        let p = params();
        let state = GaussianState::thermal_state(p, 0.98).unwrap();
        let schedule = ProtocolSchedule::canonical(&p, 0.0, 1).unwrap();
        let noise = NoiseSpec {
            synthesize_traces: true,
            detector_noise_density: 1e-5,
            low_freq_rms: 0.02,
            ..NoiseSpec::default()
        };
        let ens = ensemble(&state, &schedule, &noise, 20, 2024).unwrap();
        let traces: Vec<Trace> = ens.trials.iter().map(|t| t.trace.clone().unwrap()).collect();
        let (velocities, dropped) = velocities_from_traces(
            &traces,
            &FilterSpec::default(),
            &p,
            noise.calibration_volts_per_meter,
        )
        .unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(velocities.len(), 20);
        for (fit_v, trial) in velocities.iter().zip(&ens.trials) {
            // Detector noise floors the amplitude accuracy at a few 1e-8 m/s.
            assert_relative_eq!(
                fit_v.abs(),
                trial.measured_velocity.abs(),
                max_relative = 0.02,
                epsilon = 3e-8
            );
            if trial.final_z.abs() > 1e-11 {
                assert_eq!(fit_v.signum(), trial.measured_velocity.signum());
            }
        }
    }

    #[test]
    fn trace_pipeline_drops_bad_traces_but_not_too_many() {
        let p = params();
        let state = GaussianState::thermal_state(p, 0.98).unwrap();
        let schedule = ProtocolSchedule::canonical(&p, 0.0, 1).unwrap();
        let noise = NoiseSpec {
            synthesize_traces: true,
            ..NoiseSpec::default()
        };
        let ens = ensemble(&state, &schedule, &noise, 30, 77).unwrap();
        let mut traces: Vec<Trace> = ens.trials.iter().map(|t| t.trace.clone().unwrap()).collect();
        let stub = Trace {
            sample_rate: noise.sample_rate,
            start_time: 0.0,
            samples: vec![0.0; 16], // too short to fit
        };
        traces[4] = stub.clone();
        let (velocities, dropped) =
            velocities_from_traces(&traces, &FilterSpec::default(), &p, 1e9).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(velocities.len(), 29);

        // Ruining 3 of 30 traces crosses the 5% abort threshold.
        traces[5] = stub.clone();
        traces[6] = stub;
        match velocities_from_traces(&traces, &FilterSpec::default(), &p, 1e9) {
            Err(Error::TooManyDropped { dropped: 3, total: 30 }) => {}
            other => panic!("expected TooManyDropped, got {other:?}"),
        }
    }
}
