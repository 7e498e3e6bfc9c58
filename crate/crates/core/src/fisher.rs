//! Numerical Fisher information from finite parameter perturbations.
//!
//! The score of parameter `k` is approximated by the change in squared error
//! when `p_k` is scaled by `1 + alpha_k`:
//!
//! ```text
//! s_k = [ sum (z - y(p_k (1 + alpha_k)))^2 - sum (z - y(p))^2 ] / (2 sigma_n^2 alpha_k p_k)
//! ```
//!
//! and the nFIM is the average of `s s^T` over noise realizations.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;
use thiserror::Error;

use crate::dynsim::{SimError, Trace};
use crate::measure::{check_grid, synthesize, MeasureError, MeasurementSet};
use crate::oracle::SimOracle;
use crate::params::ParameterVector;

#[derive(Debug, Error)]
pub enum FisherError {
    #[error("perturbation alpha * p is zero for `{0}`")]
    ZeroPerturbation(String),
    #[error("no perturbation in the search range makes `{path}` visible above {threshold:.3e} (best sigma_d {best:.3e})")]
    NoFeasibleAlpha { path: String, threshold: f64, best: f64 },
    #[error("at least one noise realization is required")]
    NoSeeds,
    #[error("C must be at least 1, got {0}")]
    BadC(f64),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Numerical score from three curves on the same grid.
pub fn score(
    z: &MeasurementSet,
    y_base: &Trace,
    y_pert: &Trace,
    alpha_k: f64,
    p_k: f64,
) -> Result<f64, FisherError> {
    check_grid(z, y_base)?;
    check_grid(z, y_pert)?;
    let h = alpha_k * p_k;
    if h == 0.0 {
        return Err(FisherError::ZeroPerturbation(y_pert.channel.to_string()));
    }
    // Difference of the two squared errors, accumulated per sample to avoid
    // cancellation between two large sums.
    let diff: f64 = z
        .samples
        .iter()
        .zip(&y_base.samples)
        .zip(&y_pert.samples)
        .map(|((zi, b), p)| (b - p) * (2.0 * zi - b - p))
        .sum();
    Ok(diff / (2.0 * z.sigma_n * z.sigma_n * h))
}

/// Outer product `s s^T`.
pub fn build_nfim(scores: &[f64]) -> DMatrix<f64> {
    let n = scores.len();
    DMatrix::from_fn(n, n, |i, j| scores[i] * scores[j])
}

/// Eigenvalues of a symmetric matrix, largest first.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Number of eigenvalues above `1e-12 * lambda_max`.
pub fn numerical_rank(eigs: &[f64]) -> usize {
    let max = eigs.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eigs.iter().filter(|&&l| l > 1e-12 * max).count()
}

/// `S = D^-1 M D^-1` with `D = sqrt(diag M)`, or `None` when a diagonal
/// entry is not positive. Rank, definiteness and the inverse of `M` follow
/// from `S`, which is far better conditioned when the parameters differ by
/// orders of magnitude.
fn equilibrate(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<f64>)> {
    let n = m.nrows();
    let d: Vec<f64> = (0..n).map(|i| m[(i, i)].sqrt()).collect();
    if d.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return None;
    }
    Some((DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (d[i] * d[j])), d))
}

/// Numerical rank of an nFIM, judged on its equilibrated form.
pub fn fim_rank(m: &DMatrix<f64>) -> usize {
    let keep: Vec<usize> = (0..m.nrows()).filter(|&i| m[(i, i)] > 0.0).collect();
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| m[(keep[i], keep[j])]);
    match equilibrate(&sub) {
        Some((s, _)) => numerical_rank(&eigenvalues(&s)),
        None => 0,
    }
}

/// Per-parameter bounds `diag(I^-1)`, or `+inf` everywhere when singular.
/// The flag reports singularity.
pub fn ncrlb(nfim: &DMatrix<f64>) -> (Vec<f64>, bool) {
    let n = nfim.nrows();
    let singular = (vec![f64::INFINITY; n], true);
    if n == 0 || fim_rank(nfim) < n {
        return singular;
    }
    if n == 1 {
        return (vec![1.0 / nfim[(0, 0)]], false);
    }
    let Some((s, d)) = equilibrate(nfim) else {
        return singular;
    };
    match s.cholesky() {
        Some(ch) => {
            let inv = ch.inverse();
            ((0..n).map(|i| inv[(i, i)] / (d[i] * d[i])).collect(), false)
        }
        None => singular,
    }
}

fn ln_unit_volume(p: usize) -> f64 {
    let half = p as f64 / 2.0;
    std::f64::consts::LN_2 + half * PI.ln() - (p as f64).ln() - ln_gamma(half)
}

/// Volume of the ellipsoid with semi-axes `1/sqrt(lambda_i)`, `+inf` when any
/// eigenvalue is numerically zero or negative.
pub fn ellipsoid_volume(eigs: &[f64]) -> f64 {
    let p = eigs.len();
    if p == 0 || numerical_rank(eigs) < p || eigs.iter().any(|&l| !(l > 0.0)) {
        return f64::INFINITY;
    }
    let ln_axes: f64 = eigs.iter().map(|l| -0.5 * l.ln()).sum();
    (ln_unit_volume(p) + ln_axes).exp()
}

/// Ellipsoid volume of an nFIM. Equal to [`ellipsoid_volume`] of its
/// eigenvalues, evaluated through `det M = det S * prod D_ii^2` on the
/// equilibrated matrix.
pub fn fim_volume(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows();
    if p == 0 || fim_rank(m) < p {
        return f64::INFINITY;
    }
    let Some((s, d)) = equilibrate(m) else {
        return f64::INFINITY;
    };
    let eigs = eigenvalues(&s);
    if eigs.iter().any(|&l| !(l > 0.0)) {
        return f64::INFINITY;
    }
    let ln_det = eigs.iter().map(|l| l.ln()).sum::<f64>() + 2.0 * d.iter().map(|x| x.ln()).sum::<f64>();
    (ln_unit_volume(p) - 0.5 * ln_det).exp()
}

/// Per-unit bases for a parameter vector: an explicit `pu_base`, the time
/// constant base for entries in seconds, otherwise the entry value itself.
pub fn pu_bases(p: &ParameterVector, time_constant_base: f64) -> Vec<f64> {
    p.entries
        .iter()
        .map(|e| e.base(e.value, time_constant_base))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FimReport {
    pub parameters: Vec<String>,
    pub nfim: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    #[serde(with = "crate::serde_float::vec")]
    pub ncrlb: Vec<f64>,
    pub singular: bool,
    #[serde(with = "crate::serde_float")]
    pub v_e: f64,
    pub sigma_d: Vec<f64>,
    pub alpha_used: Vec<f64>,
    pub sigma_n: f64,
    pub realizations: usize,
    pub pu_bases: Vec<f64>,
    #[serde(with = "crate::serde_float::vec")]
    pub ncrlb_pu: Vec<f64>,
    #[serde(with = "crate::serde_float")]
    pub v_e_pu: f64,
}

impl FimReport {
    pub fn from_matrix(
        p: &ParameterVector,
        nfim: DMatrix<f64>,
        sigma_d: Vec<f64>,
        sigma_n: f64,
        realizations: usize,
        pu_bases: Vec<f64>,
    ) -> Self {
        let eigs = eigenvalues(&nfim);
        let (bounds, singular) = ncrlb(&nfim);
        let n = nfim.nrows();
        let scaled = DMatrix::from_fn(n, n, |i, j| nfim[(i, j)] * pu_bases[i] * pu_bases[j]);
        Self {
            parameters: p.entries.iter().map(|e| e.path.clone()).collect(),
            nfim: (0..n).map(|i| nfim.row(i).iter().copied().collect()).collect(),
            rank: fim_rank(&nfim),
            v_e: fim_volume(&nfim),
            eigenvalues: eigs,
            ncrlb_pu: bounds.iter().zip(&pu_bases).map(|(b, s)| b / (s * s)).collect(),
            ncrlb: bounds,
            singular,
            sigma_d,
            alpha_used: p.entries.iter().map(|e| e.alpha).collect(),
            sigma_n,
            realizations,
            v_e_pu: fim_volume(&scaled),
            pu_bases,
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.nfim.len();
        DMatrix::from_fn(n, n, |i, j| self.nfim[i][j])
    }
}

/// Base trace and one perturbed trace per parameter. These do not depend on
/// the noise realization and are reused across all of them.
#[derive(Debug, Clone)]
pub struct PerturbedTraces {
    pub base: Trace,
    pub perturbed: Vec<Trace>,
    /// Absolute perturbations `alpha_k p_k`.
    pub steps: Vec<f64>,
}

impl PerturbedTraces {
    pub fn compute<O: SimOracle + ?Sized>(oracle: &O, p: &ParameterVector) -> Result<Self, FisherError> {
        let base = oracle.evaluate(p)?;
        Self::with_base(oracle, p, base)
    }

    pub fn with_base<O: SimOracle + ?Sized>(
        oracle: &O,
        p: &ParameterVector,
        base: Trace,
    ) -> Result<Self, FisherError> {
        let mut steps = Vec::with_capacity(p.len());
        for e in &p.entries {
            let h = e.alpha * e.value;
            if h == 0.0 {
                return Err(FisherError::ZeroPerturbation(e.path.clone()));
            }
            steps.push(h);
        }
        let perturbed = (0..p.len())
            .map(|k| oracle.evaluate(&p.perturbed(k, p.entries[k].alpha)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            base,
            perturbed,
            steps,
        })
    }

    /// Standard deviation of each difference curve `y_pert - y_base`.
    pub fn sigma_d(&self) -> Vec<f64> {
        self.perturbed
            .iter()
            .map(|t| difference_std(&t.samples, &self.base.samples))
            .collect()
    }

    pub fn scores(&self, z: &MeasurementSet) -> Result<Vec<f64>, FisherError> {
        self.perturbed
            .iter()
            .zip(&self.steps)
            .map(|(yp, &h)| score(z, &self.base, yp, 1.0, h))
            .collect()
    }
}

pub(crate) fn difference_std(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Element-wise mean of the outer products, summed in input order.
pub fn mean_outer(scores: &[Vec<f64>]) -> DMatrix<f64> {
    let p = scores.first().map_or(0, Vec::len);
    let mut acc = DMatrix::zeros(p, p);
    for s in scores {
        acc += build_nfim(s);
    }
    acc / scores.len().max(1) as f64
}

/// Averages `s s^T` over measurements `z = y(p) + noise` drawn with each seed.
pub fn empirical_nfim<O: SimOracle + ?Sized>(
    oracle: &O,
    p: &ParameterVector,
    sigma_n: f64,
    seeds: &[u64],
    time_constant_base: f64,
) -> Result<FimReport, FisherError> {
    if seeds.is_empty() {
        return Err(FisherError::NoSeeds);
    }
    let traces = PerturbedTraces::compute(oracle, p)?;
    let scores = seeds
        .par_iter()
        .map(|&seed| {
            let z = synthesize(&traces.base, sigma_n, seed)?;
            traces.scores(&z)
        })
        .collect::<Result<Vec<_>, FisherError>>()?;
    Ok(FimReport::from_matrix(
        p,
        mean_outer(&scores),
        traces.sigma_d(),
        sigma_n,
        seeds.len(),
        pu_bases(p, time_constant_base),
    ))
}

/// Geometric grid of 50 relative perturbations from 0.001 to 1.
pub fn alpha_grid() -> Vec<f64> {
    alpha_grid_up_to(1.0)
}

/// The geometric grid of [`alpha_grid`] continued with the same ratio up to
/// `alpha_max`, or truncated at it.
pub fn alpha_grid_up_to(alpha_max: f64) -> Vec<f64> {
    (0..)
        .map(|i| 1e-3 * 1e3f64.powf(i as f64 / 49.0))
        .take_while(|a| *a <= alpha_max * (1.0 + 1e-12))
        .collect()
}

/// Smallest grid perturbation of parameter `k` whose difference curve has a
/// standard deviation above `c * sigma_n`. Returns `(alpha, sigma_d)`.
pub fn calibrate_alpha<O: SimOracle + ?Sized>(
    oracle: &O,
    p: &ParameterVector,
    k: usize,
    sigma_n: f64,
    c: f64,
) -> Result<(f64, f64), FisherError> {
    calibrate_alpha_on(oracle, p, k, sigma_n, c, &alpha_grid())
}

/// [`calibrate_alpha`] over an explicit ascending grid.
pub fn calibrate_alpha_on<O: SimOracle + ?Sized>(
    oracle: &O,
    p: &ParameterVector,
    k: usize,
    sigma_n: f64,
    c: f64,
    grid: &[f64],
) -> Result<(f64, f64), FisherError> {
    if !(c >= 1.0) {
        return Err(FisherError::BadC(c));
    }
    let base = oracle.evaluate(p)?;
    let threshold = c * sigma_n;
    let mut best: f64 = 0.0;
    for &alpha in grid {
        let y = oracle.evaluate(&p.perturbed(k, alpha))?;
        let sd = difference_std(&y.samples, &base.samples);
        if sd > threshold {
            return Ok((alpha, sd));
        }
        best = best.max(sd);
    }
    Err(FisherError::NoFeasibleAlpha {
        path: p.entries[k].path.clone(),
        threshold,
        best,
    })
}
