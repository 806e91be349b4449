//! Weighted least-squares machinery shared by the analysis and calibration
//! estimators: linear fits solved through the normal equations and a small
//! Levenberg-Marquardt loop for the nonlinear models (sinusoid, Gaussian).
//!
//! Weight convention: with unit weights the parameter covariance
//! `(J^T J)^{-1}` is scaled by the reduced chi-square, i.e. the point
//! scatter sets the error bars.  When per-point standard errors are
//! supplied the covariance `(J^T W J)^{-1}` is additionally inflated by the
//! reduced chi-square whenever it exceeds one: supplied errors that prove
//! optimistic against the actual residuals are corrected, while consistent
//! or conservative ones are taken at face value (never deflated).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Result of a least-squares solve, linear or nonlinear.
#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub params: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub residual_rms: f64,
}

impl LsqSolution {
    pub fn std_errors(&self) -> Vec<f64> {
        self.covariance
            .iter()
            .enumerate()
            .map(|(i, row)| row[i].max(0.0).sqrt())
            .collect()
    }
}

fn weights_from_sigma(n: usize, sigma: Option<&[f64]>) -> Result<Vec<f64>> {
    match sigma {
        None => Ok(vec![1.0; n]),
        Some(s) => {
            if s.len() != n {
                return Err(Error::invalid("sigma length does not match data length"));
            }
            s.iter()
                .map(|&si| {
                    if si > 0.0 && si.is_finite() {
                        Ok(1.0 / (si * si))
                    } else {
                        Err(Error::invalid("per-point standard errors must be > 0"))
                    }
                })
                .collect()
        }
    }
}

/// Solve min ||W^(1/2) (A x - y)||^2.  `design` is row-major, one row per
/// observation.  Returns parameters, covariance and unweighted residual rms.
pub fn linear_fit(
    design: &[Vec<f64>],
    y: &[f64],
    sigma: Option<&[f64]>,
) -> Result<LsqSolution> {
    let n = y.len();
    if design.len() != n || n == 0 {
        return Err(Error::invalid("design matrix and data length mismatch"));
    }
    let p = design[0].len();
    if p == 0 || design.iter().any(|row| row.len() != p) {
        return Err(Error::invalid("design matrix rows must share one width"));
    }
    if n < p {
        return Err(Error::InsufficientData(format!(
            "{n} observations for {p} parameters"
        )));
    }
    let w = weights_from_sigma(n, sigma)?;

    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut atb = DVector::<f64>::zeros(p);
    for (row, (&yi, &wi)) in design.iter().zip(y.iter().zip(w.iter())) {
        for j in 0..p {
            atb[j] += wi * row[j] * yi;
            for k in j..p {
                ata[(j, k)] += wi * row[j] * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            ata[(j, k)] = ata[(k, j)];
        }
    }

    let chol = ata
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateInput("singular normal equations".into()))?;
    let x = chol.solve(&atb);
    let mut cov = chol.inverse();

    let mut chi2 = 0.0;
    let mut ss = 0.0;
    for (row, (&yi, &wi)) in design.iter().zip(y.iter().zip(w.iter())) {
        let fit: f64 = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let res = yi - fit;
        chi2 += wi * res * res;
        ss += res * res;
    }
    if n > p {
        let reduced = chi2 / (n - p) as f64;
        if sigma.is_none() || reduced > 1.0 {
            cov *= reduced;
        }
    }

    Ok(LsqSolution {
        params: x.iter().copied().collect(),
        covariance: matrix_to_rows(&cov),
        residual_rms: (ss / n as f64).sqrt(),
    })
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Heteroscedasticity-robust (sandwich) covariance for an unweighted
/// least-squares solution: `(JᵀJ)⁻¹ · Jᵀ diag(r²/(1−h)²) J · (JᵀJ)⁻¹`, where
/// `h` is the hat-matrix diagonal (the HC3 leverage correction, which keeps
/// the estimate honest when a few high-leverage points dominate the fit).
/// Appropriate when the point scatter varies across the sample and no
/// per-point errors are available, e.g. counting noise on histogram bins.
pub fn sandwich_covariance(design: &[Vec<f64>], residuals: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = design.len();
    if n == 0 || n != residuals.len() {
        return Err(Error::DegenerateInput(
            "sandwich covariance needs one residual per design row".into(),
        ));
    }
    let p = design[0].len();
    if n <= p {
        return Err(Error::DegenerateInput(
            "sandwich covariance needs more points than parameters".into(),
        ));
    }
    let jac = DMatrix::from_fn(n, p, |i, j| design[i][j]);
    let bread = (jac.transpose() * &jac)
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::DegenerateInput("singular normal equations".into()))?;
    let weights = DVector::from_iterator(
        n,
        residuals.iter().enumerate().map(|(i, r)| {
            let row = jac.row(i);
            let leverage = (row * &bread * row.transpose())[(0, 0)];
            let shrink = (1.0 - leverage).max(1.0 / n as f64);
            (r / shrink) * (r / shrink)
        }),
    );
    let meat = jac.transpose() * DMatrix::from_diagonal(&weights) * &jac;
    let cov = &bread * meat * &bread;
    Ok(matrix_to_rows(&cov))
}

/// Levenberg-Marquardt with analytic Jacobian.
///
/// `model(p, x)` evaluates the fit function, `jacobian(p, x)` its gradient
/// with respect to the parameters.  Converges on a relative chi-square
/// change below 1e-12; errors out if the damping parameter runs away first.
pub fn levenberg_marquardt<F, J>(
    model: F,
    jacobian: J,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
    init: &[f64],
    max_iter: usize,
) -> Result<LsqSolution>
where
    F: Fn(&[f64], f64) -> f64,
    J: Fn(&[f64], f64) -> Vec<f64>,
{
    let n = x.len();
    let p = init.len();
    if y.len() != n || n == 0 {
        return Err(Error::invalid("x and y length mismatch"));
    }
    if n < p {
        return Err(Error::InsufficientData(format!(
            "{n} observations for {p} parameters"
        )));
    }
    let w = weights_from_sigma(n, sigma)?;

    let chi2_of = |params: &[f64]| -> f64 {
        x.iter()
            .zip(y.iter().zip(w.iter()))
            .map(|(&xi, (&yi, &wi))| {
                let r = yi - model(params, xi);
                wi * r * r
            })
            .sum()
    };

    let mut params = init.to_vec();
    let mut chi2 = chi2_of(&params);
    let mut lambda = 1e-3;
    let mut converged = false;

    for _ in 0..max_iter {
        // Build J^T W J and J^T W r at the current point.
        let mut jtj = DMatrix::<f64>::zeros(p, p);
        let mut jtr = DVector::<f64>::zeros(p);
        for (&xi, (&yi, &wi)) in x.iter().zip(y.iter().zip(w.iter())) {
            let g = jacobian(&params, xi);
            let r = yi - model(&params, xi);
            for j in 0..p {
                jtr[j] += wi * g[j] * r;
                for k in j..p {
                    jtj[(j, k)] += wi * g[j] * g[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                jtj[(j, k)] = jtj[(k, j)];
            }
        }

        // Damped step; retry with a stiffer lambda while the step fails.
        let mut stepped = false;
        while lambda < 1e14 {
            let mut damped = jtj.clone();
            for j in 0..p {
                damped[(j, j)] += lambda * jtj[(j, j)].max(1e-300);
            }
            if let Some(chol) = damped.cholesky() {
                let delta = chol.solve(&jtr);
                let trial: Vec<f64> = params
                    .iter()
                    .zip(delta.iter())
                    .map(|(a, b)| a + b)
                    .collect();
                let trial_chi2 = chi2_of(&trial);
                if trial_chi2.is_finite() && trial_chi2 <= chi2 {
                    let improvement = chi2 - trial_chi2;
                    params = trial;
                    let prev = chi2;
                    chi2 = trial_chi2;
                    lambda = (lambda * 0.3).max(1e-12);
                    stepped = true;
                    if improvement <= 1e-12 * prev.max(1e-300) {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !stepped {
            // No downhill step found at any damping: either we are at the
            // optimum (tiny gradient) or genuinely stuck.
            let grad_norm: f64 = jtr.iter().map(|g| g * g).sum::<f64>().sqrt();
            if grad_norm <= 1e-8 * chi2.max(1e-300) + 1e-300 {
                converged = true;
                break;
            }
            return Err(Error::FitDidNotConverge(format!(
                "damping exhausted at chi2 = {chi2:.6e}"
            )));
        }
    }
    if !converged {
        return Err(Error::FitDidNotConverge(
            "iteration budget exhausted".into(),
        ));
    }

    // Covariance at the solution.
    let mut jtj = DMatrix::<f64>::zeros(p, p);
    for (i, &xi) in x.iter().enumerate() {
        let g = jacobian(&params, xi);
        for j in 0..p {
            for k in j..p {
                jtj[(j, k)] += w[i] * g[j] * g[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            jtj[(j, k)] = jtj[(k, j)];
        }
    }
    let mut cov = jtj
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    if n > p {
        let reduced = chi2 / (n - p) as f64;
        if sigma.is_none() || reduced > 1.0 {
            cov *= reduced;
        }
    }

    let ss: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(&xi, &yi)| {
            let r = yi - model(&params, xi);
            r * r
        })
        .sum();

    Ok(LsqSolution {
        params,
        covariance: matrix_to_rows(&cov),
        residual_rms: (ss / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let design: Vec<Vec<f64>> = x.iter().map(|&xi| vec![1.0, xi]).collect();
        let y: Vec<f64> = x.iter().map(|&xi| 2.5 - 0.75 * xi).collect();
        let fit = linear_fit(&design, &y, None).unwrap();
        assert_relative_eq!(fit.params[0], 2.5, max_relative = 1e-12);
        assert_relative_eq!(fit.params[1], -0.75, max_relative = 1e-12);
        assert!(fit.residual_rms < 1e-12);
    }

    #[test]
    fn weighted_fit_uses_supplied_errors() {
        // Two consistent measurements of a constant; the tighter one
        // dominates and the covariance stays at the supplied-error value.
        let design = vec![vec![1.0], vec![1.0]];
        let y = [1.0, 1.0];
        let sigma = [0.1, 1.0];
        let fit = linear_fit(&design, &y, Some(&sigma)).unwrap();
        let w0 = 100.0;
        let w1 = 1.0;
        assert_relative_eq!(fit.params[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(
            fit.covariance[0][0],
            1.0 / (w0 + w1),
            max_relative = 1e-12
        );
    }

    #[test]
    fn optimistic_supplied_errors_are_inflated() {
        // Two equally weighted points scattered far beyond their claimed
        // errors: the parameter error must grow to the observed standard
        // error of the mean instead of trusting the claimed sigmas.
        let design = vec![vec![1.0], vec![1.0]];
        let y = [1.0, 3.0];
        let sigma = [0.1, 0.1];
        let fit = linear_fit(&design, &y, Some(&sigma)).unwrap();
        assert_relative_eq!(fit.params[0], 2.0, max_relative = 1e-12);
        // Sample standard error of the mean of [1, 3] is exactly 1.
        assert_relative_eq!(fit.covariance[0][0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn degenerate_design_is_rejected() {
        let design = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]];
        let y = [1.0, 1.0, 1.0];
        assert!(matches!(
            linear_fit(&design, &y, None),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn lm_fits_an_exponential() {
        let model = |p: &[f64], x: f64| p[0] * (-p[1] * x).exp();
        let jac = |p: &[f64], x: f64| {
            let e = (-p[1] * x).exp();
            vec![e, -p[0] * x * e]
        };
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|&xi| 3.0 * (-0.7 * xi).exp()).collect();
        let fit = levenberg_marquardt(model, jac, &x, &y, None, &[1.0, 0.2], 200).unwrap();
        assert_relative_eq!(fit.params[0], 3.0, max_relative = 1e-8);
        assert_relative_eq!(fit.params[1], 0.7, max_relative = 1e-8);
    }
}
