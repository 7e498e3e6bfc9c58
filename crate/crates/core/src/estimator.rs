//! Bounded Levenberg-Marquardt fit against a black-box simulator.
//!
//! Parameters are scaled by `D = diag(1 / max(|p0_k|, d_floor))`, the
//! Jacobian is taken by forward differences and every trial point is
//! projected onto the box `[lower, upper]`. The loop stops as soon as the
//! relative change in SSE drops to `zeta`, or the scaled step `|D dp|` drops
//! to `eta`, or after `max_iter` Jacobian evaluations.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::dynsim::SimError;
use crate::measure::{check_grid, MeasureError, MeasurementSet};
use crate::oracle::SimOracle;
use crate::params::{ParameterError, ParameterVector};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Parameters(#[from] ParameterError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("invalid fit options: {0}")]
    Options(String),
    #[error("nothing to fit: parameter vector is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Relative SSE-change threshold.
    pub zeta: f64,
    /// Scaled step-norm threshold.
    pub eta: f64,
    pub max_iter: usize,
    /// Relative forward-difference step.
    pub fd_step: f64,
    /// Lower limit on `|p0_k|` in the scaling and on `|p_k|` in the FD step.
    pub d_floor: f64,
    /// Evaluate Jacobian columns on the rayon pool.
    pub parallel_jacobian: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            zeta: 1e-6,
            eta: 1e-6,
            max_iter: 50,
            fd_step: 1e-4,
            d_floor: 1e-3,
            parallel_jacobian: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergedBy {
    FunctionTol,
    StepTol,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub p_hat: ParameterVector,
    /// SSE at the start and after every accepted step.
    pub sse_history: Vec<f64>,
    /// Scaled step norm per accepted step (0 for the initial point).
    pub step_norms: Vec<f64>,
    /// Damping in force when each step was accepted.
    pub damping: Vec<f64>,
    pub iterations: usize,
    pub converged_by: ConvergedBy,
    pub residual_final: f64,
    pub evaluations: usize,
}

impl EstimationResult {
    /// Per-iteration CSV: `iter,sse,step_norm,damping`.
    pub fn write_log<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iter,sse,step_norm,damping")?;
        for i in 0..self.sse_history.len() {
            writeln!(
                w,
                "{},{},{},{}",
                i, self.sse_history[i], self.step_norms[i], self.damping[i]
            )?;
        }
        Ok(())
    }
}

/// `r_i = z_i - y_i(p)`.
pub fn residuals<O: SimOracle + ?Sized>(
    oracle: &O,
    z: &MeasurementSet,
    p: &ParameterVector,
) -> Result<DVector<f64>, EstimatorError> {
    p.validate()?;
    let y = oracle.evaluate(p)?;
    check_grid(z, &y)?;
    Ok(DVector::from_iterator(
        z.len(),
        z.samples.iter().zip(&y.samples).map(|(a, b)| a - b),
    ))
}

fn fd_step(p: &ParameterVector, k: usize, rel: f64, floor: f64) -> f64 {
    let e = &p.entries[k];
    let h = rel * e.value.abs().max(floor);
    if e.value + h > e.upper {
        -h
    } else {
        h
    }
}

fn jacobian_with<O: SimOracle + ?Sized>(
    oracle: &O,
    z: &MeasurementSet,
    p: &ParameterVector,
    r0: &DVector<f64>,
    rel_steps: &[f64],
    floor: f64,
    parallel: bool,
) -> Result<DMatrix<f64>, EstimatorError> {
    if rel_steps.len() != p.len() || rel_steps.iter().any(|s| !(*s > 0.0)) {
        return Err(EstimatorError::Options("one positive relative step per parameter".into()));
    }
    let column = |k: usize| -> Result<DVector<f64>, EstimatorError> {
        let h = fd_step(p, k, rel_steps[k], floor);
        let mut q = p.clone();
        q.entries[k].value += h;
        let y = oracle.evaluate(&q)?;
        check_grid(z, &y)?;
        Ok(DVector::from_iterator(
            z.len(),
            z.samples
                .iter()
                .zip(&y.samples)
                .zip(r0.iter())
                .map(|((zi, yi), r)| (zi - yi - r) / h),
        ))
    };
    let cols: Vec<DVector<f64>> = if parallel {
        (0..p.len()).into_par_iter().map(column).collect::<Result<_, _>>()?
    } else {
        (0..p.len()).map(column).collect::<Result<_, _>>()?
    };
    Ok(DMatrix::from_columns(&cols))
}

/// Forward-difference `dr/dp`, `N x P`. Steps go backwards when the forward
/// step would leave the upper bound.
pub fn jacobian_fd<O: SimOracle + ?Sized>(
    oracle: &O,
    z: &MeasurementSet,
    p: &ParameterVector,
    rel_steps: &[f64],
) -> Result<DMatrix<f64>, EstimatorError> {
    let r0 = residuals(oracle, z, p)?;
    jacobian_with(oracle, z, p, &r0, rel_steps, FitOptions::default().d_floor, false)
}

fn project(p: &ParameterVector, values: &[f64]) -> ParameterVector {
    let mut out = p.clone();
    for (e, &v) in out.entries.iter_mut().zip(values) {
        e.value = v.clamp(e.lower, e.upper);
    }
    out
}

pub fn fit<O: SimOracle + ?Sized>(
    oracle: &O,
    z: &MeasurementSet,
    p0: &ParameterVector,
    opts: &FitOptions,
) -> Result<EstimationResult, EstimatorError> {
    if p0.is_empty() {
        return Err(EstimatorError::Empty);
    }
    if !(opts.zeta > 0.0 && opts.eta > 0.0 && opts.fd_step > 0.0 && opts.d_floor > 0.0) {
        return Err(EstimatorError::Options("zeta, eta, fd_step and d_floor must be positive".into()));
    }
    p0.validate()?;
    let n_par = p0.len();
    let scale: Vec<f64> = p0.entries.iter().map(|e| e.value.abs().max(opts.d_floor)).collect();
    let rel_steps = vec![opts.fd_step; n_par];

    let mut p = p0.clone();
    let mut r = residuals(oracle, z, &p)?;
    let mut sse = r.norm_squared();
    let mut evaluations = 1;
    let mut sse_history = vec![sse];
    let mut step_norms = vec![0.0];
    let mut damping = vec![0.0];
    let mut mu: Option<f64> = None;
    let mut converged_by = ConvergedBy::MaxIter;
    let mut iterations = 0;

    'outer: while iterations < opts.max_iter {
        if sse == 0.0 {
            converged_by = ConvergedBy::FunctionTol;
            break;
        }
        iterations += 1;
        let j = jacobian_with(oracle, z, &p, &r, &rel_steps, opts.d_floor, opts.parallel_jacobian)?;
        evaluations += n_par;
        let js = DMatrix::from_fn(j.nrows(), n_par, |i, k| j[(i, k)] * scale[k]);
        let a = js.transpose() * &js;
        let g = js.transpose() * &r;
        let lambda = *mu.get_or_insert_with(|| {
            let t = a.trace() / n_par as f64;
            if t > 0.0 {
                1e-3 * t
            } else {
                1e-3
            }
        });
        let mut lambda = lambda;

        loop {
            let mut lhs = a.clone();
            for k in 0..n_par {
                lhs[(k, k)] += lambda;
            }
            // Residual r = z - y decreases along -J^T r for dr/dp = J.
            let du = match lhs.clone().cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => match lhs.lu().solve(&(-&g)) {
                    Some(v) => v,
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                },
            };
            let trial_values: Vec<f64> = (0..n_par)
                .map(|k| p.entries[k].value + du[k] * scale[k])
                .collect();
            let trial = project(&p, &trial_values);
            let step_norm = (0..n_par)
                .map(|k| ((trial.entries[k].value - p.entries[k].value) / scale[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if step_norm <= opts.eta {
                converged_by = ConvergedBy::StepTol;
                break 'outer;
            }
            evaluations += 1;
            let r_new = match residuals(oracle, z, &trial) {
                Ok(r) => r,
                Err(EstimatorError::Sim(_)) => {
                    lambda *= 10.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let sse_new = r_new.norm_squared();
            if sse_new < sse {
                let rel = (sse - sse_new) / sse;
                p = trial;
                r = r_new;
                sse = sse_new;
                sse_history.push(sse);
                step_norms.push(step_norm);
                damping.push(lambda);
                mu = Some(lambda / 10.0);
                if rel <= opts.zeta {
                    converged_by = ConvergedBy::FunctionTol;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
        }
    }

    Ok(EstimationResult {
        p_hat: p,
        sse_history,
        step_norms,
        damping,
        iterations,
        converged_by,
        residual_final: sse,
        evaluations,
    })
}
