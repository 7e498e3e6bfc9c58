use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ScoreNoise, StudyConfig};
use super::study::StudyContext;
use super::{with_workers, HarnessError};
use crate::estimator::fit;
use crate::fisher::{score, FisherError};
use crate::measure::{synthesize, MeasurementSet};
use crate::oracle::SimOracle;
use crate::params::ParameterVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    /// Scalar nFIM averaged over the measurement sets.
    pub nfim: f64,
    /// `nfim / nfim(alpha = 1)`.
    pub normalized: f64,
}

/// Scores of the single parameter in `p` for every relative perturbation.
pub fn sweep_scores<O: SimOracle + ?Sized>(
    oracle: &O,
    z: &MeasurementSet,
    p: &ParameterVector,
    alphas: &[f64],
) -> Result<Vec<f64>, FisherError> {
    let base = oracle.evaluate(p)?;
    let value = p.entries[0].value;
    alphas
        .iter()
        .map(|&a| {
            let y = oracle.evaluate(&p.perturbed(0, a))?;
            score(z, &base, &y, a, value)
        })
        .collect()
}

/// Scalar nFIM of `parameter` at its fitted value as a function of the
/// relative perturbation, on the first candidate channel. Each of the
/// `cfg.trials` measurement sets is fitted once; the squared scores are
/// averaged over the sets and normalized by the value at `alpha = 1`.
pub fn perturbation_sweep(
    cfg: &StudyConfig,
    parameter: &str,
    alphas: &[f64],
    workers: Option<usize>,
) -> Result<Vec<SweepPoint>, HarnessError> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
        return Err(HarnessError::Config("sweep alphas must be non-empty and positive".into()));
    }
    let ctx = StudyContext::new(cfg)?;
    let k = cfg
        .parameters
        .iter()
        .position(|s| s.path == parameter)
        .ok_or_else(|| HarnessError::Config(format!("parameter `{parameter}` is not part of the study")))?;
    let mut grid = alphas.to_vec();
    grid.push(1.0);
    let per_set = with_workers(workers, || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|j| -> Result<Vec<f64>, HarnessError> {
                let oracle = ctx.channel(0);
                let z = ctx.measurement(j, 0)?;
                let res = fit(&oracle, &z, &ctx.single(k, 1.0), &cfg.fit)?;
                let z_score = match cfg.score_noise {
                    ScoreNoise::Trial => z,
                    ScoreNoise::Independent => {
                        let base = oracle.evaluate(&res.p_hat)?;
                        synthesize(&base, z.sigma_n, ctx.score_seed(j, 0))?
                    }
                };
                Ok(sweep_scores(&oracle, &z_score, &res.p_hat, &grid)?
                    .into_iter()
                    .map(|s| s * s)
                    .collect())
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    let avg: Vec<f64> = (0..grid.len())
        .map(|i| per_set.iter().map(|v| v[i]).sum::<f64>() / per_set.len() as f64)
        .collect();
    let reference = *avg.last().expect("reference point");
    Ok(alphas
        .iter()
        .zip(&avg)
        .map(|(&alpha, &nfim)| SweepPoint {
            alpha,
            nfim,
            normalized: nfim / reference,
        })
        .collect())
}
