//! Small dense nonlinear least squares (Levenberg-Marquardt damped
//! Gauss-Newton) used by the lineshape and correlation-histogram fits.
//!
//! Parameters should be pre-scaled by the caller to order unity; the
//! Jacobian is taken by central differences with a fixed relative step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the relative decrease of the cost falls below this.
    pub cost_tolerance: f64,
    /// Stop when the step norm relative to the parameter norm falls below this.
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            cost_tolerance: 1e-15,
            step_tolerance: 1e-13,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// Half the sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
    /// Approximate parameter covariance `s^2 (J^T J)^-1`, with `s^2` the
    /// residual variance. `None` when the normal matrix is singular.
    pub covariance: Option<DMatrix<f64>>,
}

fn cost_of(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn jacobian<F>(f: &F, p: &[f64], m: usize) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = p.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut work = p.to_vec();
    for j in 0..n {
        let h = 1e-7 * p[j].abs().max(1.0);
        work[j] = p[j] + h;
        let up = f(&work);
        work[j] = p[j] - h;
        let down = f(&work);
        work[j] = p[j];
        for i in 0..m {
            let d = (up[i] - down[i]) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::FitFailure("non-finite Jacobian".into()));
            }
            jac[(i, j)] = d;
        }
    }
    Ok(jac)
}

/// Minimizes `0.5 * |residuals(p)|^2` starting from `initial`.
pub fn levenberg_marquardt<F>(residuals: F, initial: &[f64], opts: LmOptions) -> Result<LmReport>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = initial.len();
    let mut p = initial.to_vec();
    let mut r = residuals(&p);
    let m = r.len();
    if m < n {
        return Err(Error::FitFailure(format!(
            "{m} residuals cannot determine {n} parameters"
        )));
    }
    let mut cost = cost_of(&r);
    if !cost.is_finite() {
        return Err(Error::FitFailure("non-finite initial cost".into()));
    }
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let jac = jacobian(&residuals, &p, m)?;
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);

        let mut accepted = false;
        let mut converged = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let r_trial = residuals(&trial);
            let c_trial = cost_of(&r_trial);
            if c_trial.is_finite() && c_trial <= cost {
                let rel_drop = (cost - c_trial) / cost.max(f64::MIN_POSITIVE);
                let p_norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                let small_step = step.norm() / p_norm < opts.step_tolerance;
                p = trial;
                r = r_trial;
                cost = c_trial;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                converged = rel_drop < opts.cost_tolerance || small_step || cost == 0.0;
                break;
            }
            lambda *= 4.0;
        }
        if !accepted || converged {
            break;
        }
    }

    let jac = jacobian(&residuals, &p, m)?;
    let jtj = jac.transpose() * &jac;
    let dof = (m - n).max(1) as f64;
    let s2 = 2.0 * cost / dof;
    let covariance = jtj.try_inverse().map(|inv| inv * s2);
    Ok(LmReport {
        params: p,
        cost,
        iterations,
        covariance,
    })
}
