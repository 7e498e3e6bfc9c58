use serde::{Deserialize, Serialize};

use super::config::StudyConfig;
use super::study::StudyContext;
use super::{with_workers, HarnessError};
use crate::dynsim::ChannelSpec;
use crate::estimator::{fit, EstimationResult, FitOptions};
use crate::fisher::{alpha_grid_up_to, calibrate_alpha_on, empirical_nfim, FimReport, FisherError};
use crate::measure::MeasurementSet;
use crate::oracle::SimOracle;
use crate::params::ParameterVector;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub channel: ChannelSpec,
    pub sigma_n: f64,
    pub infeasible: Option<String>,
    pub fim: Option<FimReport>,
    #[serde(with = "crate::serde_float")]
    pub v_e: f64,
    #[serde(with = "crate::serde_float")]
    pub v_e_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub selected: usize,
    pub channel: ChannelSpec,
    pub candidates: Vec<CandidateReport>,
    pub estimation: EstimationResult,
    /// nFIM of the selected channel at the fitted parameters.
    pub fim: FimReport,
}

/// Settings shared by every candidate channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    pub c: f64,
    pub alpha_max: f64,
    pub realizations: usize,
    pub seed: u64,
    pub time_constant_base: f64,
    pub fit: FitOptions,
}

impl From<&StudyConfig> for SelectionOptions {
    fn from(cfg: &StudyConfig) -> Self {
        Self {
            c: cfg.c,
            alpha_max: cfg.alpha_max,
            realizations: cfg.realizations,
            seed: cfg.seed,
            time_constant_base: cfg.time_constant_base,
            fit: cfg.fit,
        }
    }
}

fn candidate<O: SimOracle + ?Sized>(
    oracle: &O,
    z: &MeasurementSet,
    p0: &ParameterVector,
    explicit: &[bool],
    opts: &SelectionOptions,
) -> Result<(CandidateReport, ParameterVector), HarnessError> {
    let mut p = p0.clone();
    let mut report = CandidateReport {
        channel: z.channel.clone(),
        sigma_n: z.sigma_n,
        infeasible: None,
        fim: None,
        v_e: f64::INFINITY,
        v_e_pu: f64::INFINITY,
    };
    let grid = alpha_grid_up_to(opts.alpha_max);
    for k in 0..p.len() {
        if explicit[k] {
            continue;
        }
        match calibrate_alpha_on(oracle, p0, k, z.sigma_n, opts.c, &grid) {
            Ok((a, _)) => p.entries[k].alpha = a,
            Err(e @ FisherError::NoFeasibleAlpha { .. }) => {
                report.infeasible = Some(e.to_string());
                return Ok((report, p));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let seeds: Vec<u64> = (0..opts.realizations as u64)
        .map(|r| derive_seed(opts.seed, r))
        .collect();
    let fim = empirical_nfim(oracle, &p, z.sigma_n, &seeds, opts.time_constant_base)?;
    report.v_e = fim.v_e;
    report.v_e_pu = fim.v_e_pu;
    report.fim = Some(fim);
    Ok((report, p))
}

/// Calibrates the perturbations and computes the averaged nFIM at `p0` for
/// every candidate, selects the candidate with the smallest per-unit
/// ellipsoid volume and fits the parameters to its measurements. Entries of
/// `p0` flagged in `explicit_alpha` keep their own perturbation.
pub fn algorithm1(
    candidates: &[(&dyn SimOracle, &MeasurementSet)],
    p0: &ParameterVector,
    explicit_alpha: &[bool],
    opts: &SelectionOptions,
) -> Result<SelectionOutcome, HarnessError> {
    if candidates.is_empty() {
        return Err(HarnessError::Config("no candidate channels".into()));
    }
    let mut reports = Vec::with_capacity(candidates.len());
    let mut vectors = Vec::with_capacity(candidates.len());
    for (oracle, z) in candidates {
        let (r, p) = candidate(*oracle, z, p0, explicit_alpha, opts)?;
        reports.push(r);
        vectors.push(p);
    }
    let selected = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| r.v_e_pu.is_finite())
        .min_by(|a, b| a.1.v_e_pu.total_cmp(&b.1.v_e_pu))
        .map(|(i, _)| i)
        .ok_or_else(|| {
            HarnessError::AllChannelsInfeasible(
                reports
                    .iter()
                    .map(|r| format!("{}: {}", r.channel, r.infeasible.as_deref().unwrap_or("infinite V_e")))
                    .collect::<Vec<_>>()
                    .join("; "),
            )
        })?;
    let (oracle, z) = candidates[selected];
    let estimation = fit(oracle, z, &vectors[selected], &opts.fit)?;
    let seeds: Vec<u64> = (0..opts.realizations as u64)
        .map(|r| derive_seed(opts.seed, r))
        .collect();
    let fim = empirical_nfim(oracle, &estimation.p_hat, z.sigma_n, &seeds, opts.time_constant_base)?;
    Ok(SelectionOutcome {
        selected,
        channel: reports[selected].channel.clone(),
        candidates: reports,
        estimation,
        fim,
    })
}

/// Channel selection and fit on the configured plant, using the first synthetic
/// measurement set of every candidate channel.
pub fn run_algorithm1(cfg: &StudyConfig, workers: Option<usize>) -> Result<SelectionOutcome, HarnessError> {
    let ctx = StudyContext::new(cfg)?;
    let measurements = (0..cfg.channels.len())
        .map(|c| ctx.measurement(0, c))
        .collect::<Result<Vec<_>, _>>()?;
    let oracles: Vec<_> = (0..cfg.channels.len()).map(|c| ctx.channel(c)).collect();
    let candidates: Vec<(&dyn SimOracle, &MeasurementSet)> = oracles
        .iter()
        .zip(&measurements)
        .map(|(o, z)| (o as &dyn SimOracle, z))
        .collect();
    let explicit: Vec<bool> = cfg.parameters.iter().map(|s| s.alpha.is_some()).collect();
    let opts = SelectionOptions::from(cfg);
    with_workers(workers, || algorithm1(&candidates, &ctx.p0, &explicit, &opts))?
}
