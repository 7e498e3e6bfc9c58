use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExcludedAt, ScoreNoise, StudyConfig, StudyMode};
use super::stats::{mean, ranks, sample_variance, spearman};
use super::{with_workers, HarnessError};
use crate::dynsim::{simulate, ChannelSpec, Trace};
use crate::estimator::{fit, ConvergedBy, EstimationResult};
use crate::fisher::{alpha_grid_up_to, calibrate_alpha_on, mean_outer, FimReport, PerturbedTraces};
use crate::measure::{noise_sigma_from_snr, synthesize, MeasurementSet};
use crate::model::init_load_flow;
use crate::oracle::{ChannelOracle, PlantOracle};
use crate::params::{ParameterEntry, ParameterVector};
use crate::seed::derive_seed;

/// Everything a study needs that does not depend on the noise: the plant,
/// the noiseless true traces and the noise level of every channel.
pub struct StudyContext {
    pub cfg: StudyConfig,
    pub plant: PlantOracle,
    pub truth: Vec<Trace>,
    pub true_values: Vec<f64>,
    pub sigma_n: Vec<f64>,
    /// Starting vector with explicit alphas and bounds.
    pub p0: ParameterVector,
}

impl StudyContext {
    pub fn new(cfg: &StudyConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let truth_model = cfg.truth_model()?;
        let op = init_load_flow(&truth_model)?;
        let scenario = cfg.build_scenario(&truth_model);
        scenario.validate(&truth_model)?;
        let truth = simulate(&truth_model, &op, &ParameterVector::empty(), &scenario)?;
        let sigma_n = truth
            .iter()
            .map(|t| noise_sigma_from_snr(t, cfg.snr_db))
            .collect::<Result<Vec<_>, _>>()?;
        let true_values = cfg.true_values(&truth_model)?;
        let p0 = cfg.initial_vector()?;
        let fixed = match cfg.excluded_at {
            ExcludedAt::True => ParameterVector::empty(),
            ExcludedAt::Initial => p0.clone(),
        };
        let plant = PlantOracle::new(truth_model, op, scenario)
            .with_fixed(fixed)
            .with_capacity(256);
        Ok(Self {
            cfg: cfg.clone(),
            plant,
            truth,
            true_values,
            sigma_n,
            p0,
        })
    }

    pub fn channel(&self, c: usize) -> ChannelOracle<'_> {
        self.plant.channel(c)
    }

    /// Seed of the measurement set of `trial` on channel `c`.
    pub fn measurement_seed(&self, trial: usize, c: usize) -> u64 {
        derive_seed(derive_seed(self.cfg.seed, trial as u64), c as u64)
    }

    /// Seed of the independent realization used for scoring.
    pub fn score_seed(&self, trial: usize, c: usize) -> u64 {
        derive_seed(self.measurement_seed(trial, c), u64::MAX)
    }

    pub fn measurement(&self, trial: usize, c: usize) -> Result<MeasurementSet, HarnessError> {
        let mut z = synthesize(&self.truth[c], self.sigma_n[c], self.measurement_seed(trial, c))?;
        z.snr_db = Some(self.cfg.snr_db);
        Ok(z)
    }

    /// Single-entry vector for parameter `k` at its starting value.
    pub fn single(&self, k: usize, alpha: f64) -> ParameterVector {
        let mut e: ParameterEntry = self.p0.entries[k].clone();
        e.alpha = alpha;
        ParameterVector { entries: vec![e] }
    }

    /// Per-unit base of every parameter, relative to its true value.
    pub fn pu_bases(&self) -> Vec<f64> {
        self.p0
            .entries
            .iter()
            .zip(&self.true_values)
            .map(|(e, &v)| e.base(v, self.cfg.time_constant_base))
            .collect()
    }

    /// Perturbation and difference-curve deviation of every parameter on
    /// channel `c`, evaluated at the starting point. Explicit alphas are kept.
    pub fn calibrate(&self, c: usize) -> Result<Vec<(f64, f64)>, HarnessError> {
        let oracle = self.channel(c);
        (0..self.p0.len())
            .map(|k| match self.cfg.parameters[k].alpha {
                Some(a) => {
                    let tr = PerturbedTraces::compute(&oracle, &self.single(k, a))?;
                    Ok((a, tr.sigma_d()[0]))
                }
                None => Ok(calibrate_alpha_on(
                    &oracle,
                    &self.single(k, 0.0),
                    0,
                    self.sigma_n[c],
                    self.cfg.c,
                    &alpha_grid_up_to(self.cfg.alpha_max),
                )?),
            })
            .collect()
    }

    /// Starting vectors of the estimators run on every trial.
    pub fn estimators(&self, alphas: &[f64]) -> Vec<ParameterVector> {
        match self.cfg.mode {
            StudyMode::Single => (0..self.p0.len()).map(|k| self.single(k, alphas[k])).collect(),
            StudyMode::Multi => {
                let mut p = self.p0.clone();
                for (e, &a) in p.entries.iter_mut().zip(alphas) {
                    e.alpha = a;
                }
                vec![p]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub estimator: String,
    pub sse_history: Vec<f64>,
    pub step_norms: Vec<f64>,
    pub damping: Vec<f64>,
    pub converged_by: ConvergedBy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub path: String,
    pub unit: String,
    pub true_value: f64,
    pub initial: f64,
    pub alpha: f64,
    /// Absolute perturbation at the true value, `alpha * p_true`.
    pub perturbation: f64,
    pub sigma_d: f64,
    pub pu_base: f64,
    /// Averaged nFIM diagonal entry.
    pub avg_nfim: f64,
    #[serde(with = "crate::serde_float")]
    pub ncrlb: f64,
    #[serde(with = "crate::serde_float")]
    pub ncrlb_pu: f64,
    /// Confidence-ellipsoid volume of this parameter's own estimator
    /// (single-parameter studies only).
    #[serde(default, with = "crate::serde_float::opt")]
    pub v_e: Option<f64>,
    #[serde(default, with = "crate::serde_float::opt")]
    pub v_e_pu: Option<f64>,
    pub mean_estimate: Option<f64>,
    /// `100 |mean - true| / |true|`.
    pub avg_rel_error_pct: Option<f64>,
    /// Mean of `100 |p_hat - true| / |true|` over trials.
    pub mean_abs_rel_error_pct: Option<f64>,
    pub variance: Option<f64>,
    pub variance_pu: Option<f64>,
    pub rank_v_e: Option<f64>,
    pub rank_variance: Option<f64>,
    pub completed_trials: usize,
    pub failed_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub channel: ChannelSpec,
    pub unit: String,
    pub signal_mean: f64,
    pub sigma_n: f64,
    /// Reason the channel could not be studied, if any.
    pub infeasible: Option<String>,
    pub parameters: Vec<ParameterReport>,
    /// Averaged nFIM of the joint estimator (multi-parameter studies).
    pub fim: Option<FimReport>,
    /// Ellipsoid volume of the joint estimator, or the mean of the
    /// per-parameter volumes in single-parameter studies.
    #[serde(with = "crate::serde_float")]
    pub average_v_e: f64,
    #[serde(with = "crate::serde_float")]
    pub average_v_e_pu: f64,
    pub average_variance_pu: Option<f64>,
    /// Spearman correlation of per-parameter `V_e` and `sigma_p^2`.
    pub spearman: Option<f64>,
    /// Every per-unit variance is at least its per-unit nCRLB.
    pub crlb_dominated: Option<bool>,
    pub convergence: Vec<ConvergenceLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub mode: StudyMode,
    pub trials: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub c: f64,
    pub dt: f64,
    pub t_end: f64,
    pub time_constant_base: f64,
    pub channels: Vec<ChannelReport>,
    /// Channel with the smallest finite average per-unit `V_e`.
    pub selected_channel: Option<ChannelSpec>,
    /// Rank of each channel by average `V_e` (1 = smallest).
    pub channel_rank_v_e: Vec<f64>,
    /// Rank of each channel by average per-unit variance.
    pub channel_rank_variance: Option<Vec<f64>>,
    /// Set when fewer than two trials completed.
    pub variances_undefined: bool,
}

/// Noise-free traces and the first measurement set of each channel.
#[derive(Debug, Clone, Default)]
pub struct StudyArtifacts {
    pub truth: Vec<Trace>,
    pub first_measurement: Vec<MeasurementSet>,
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub report: StudyReport,
    pub artifacts: StudyArtifacts,
}

struct Outcome {
    estimates: Vec<f64>,
    scores: Vec<f64>,
    result: Option<EstimationResult>,
}

fn run_estimator(
    oracle: &ChannelOracle<'_>,
    z: &MeasurementSet,
    p0: &ParameterVector,
    ctx: &StudyContext,
    score_seed: u64,
    keep_log: bool,
) -> Result<Outcome, String> {
    let res = fit(oracle, z, p0, &ctx.cfg.fit).map_err(|e| e.to_string())?;
    let traces = PerturbedTraces::compute(oracle, &res.p_hat).map_err(|e| e.to_string())?;
    let scores = match ctx.cfg.score_noise {
        ScoreNoise::Trial => traces.scores(z),
        ScoreNoise::Independent => synthesize(&traces.base, z.sigma_n, score_seed)
            .map_err(Into::into)
            .and_then(|z_fresh| traces.scores(&z_fresh)),
    }
    .map_err(|e| e.to_string())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err("non-finite score".into());
    }
    Ok(Outcome {
        estimates: res.p_hat.values(),
        scores,
        result: keep_log.then_some(res),
    })
}

type TrialResult = Vec<Vec<Result<Outcome, String>>>;

fn run_trial(ctx: &StudyContext, trial: usize, estimators: &[Option<Vec<ParameterVector>>]) -> TrialResult {
    estimators
        .iter()
        .enumerate()
        .map(|(c, ests)| {
            let Some(ests) = ests else { return Vec::new() };
            let z = match ctx.measurement(trial, c) {
                Ok(z) => z,
                Err(e) => return ests.iter().map(|_| Err(e.to_string())).collect(),
            };
            let oracle = ctx.channel(c);
            ests.iter()
                .map(|p0| run_estimator(&oracle, &z, p0, ctx, ctx.score_seed(trial, c), trial == 0))
                .collect()
        })
        .collect()
}

/// Runs `cfg.trials` independent fits per estimator and channel and
/// aggregates estimates, variances and the nFIM at the optimized values.
/// `workers = None` uses the global rayon pool. The report does not depend on
/// the number of workers.
pub fn monte_carlo_study(cfg: &StudyConfig, workers: Option<usize>) -> Result<StudyOutput, HarnessError> {
    let ctx = StudyContext::new(cfg)?;
    with_workers(workers, || run_study(&ctx))?
}

fn run_study(ctx: &StudyContext) -> Result<StudyOutput, HarnessError> {
    let cfg = &ctx.cfg;
    let n_ch = cfg.channels.len();
    let calibration: Vec<Result<Vec<(f64, f64)>, HarnessError>> =
        (0..n_ch).into_par_iter().map(|c| ctx.calibrate(c)).collect();
    let mut infeasible = vec![None; n_ch];
    let mut calib = vec![Vec::new(); n_ch];
    for (c, r) in calibration.into_iter().enumerate() {
        match r {
            Ok(v) => calib[c] = v,
            Err(HarnessError::Fisher(e @ crate::fisher::FisherError::NoFeasibleAlpha { .. })) => {
                infeasible[c] = Some(e.to_string())
            }
            Err(e) => return Err(e),
        }
    }
    let estimators: Vec<Option<Vec<ParameterVector>>> = (0..n_ch)
        .map(|c| {
            infeasible[c].is_none().then(|| {
                let alphas: Vec<f64> = calib[c].iter().map(|x| x.0).collect();
                ctx.estimators(&alphas)
            })
        })
        .collect();

    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|j| run_trial(ctx, j, &estimators))
        .collect();

    let bases = ctx.pu_bases();
    let mut channels = Vec::with_capacity(n_ch);
    for c in 0..n_ch {
        channels.push(aggregate_channel(ctx, c, &calib[c], infeasible[c].clone(), &estimators[c], &trials, &bases)?);
    }

    let v_e: Vec<f64> = channels.iter().map(|ch| ch.average_v_e_pu).collect();
    let selected_channel = v_e
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| channels[i].channel.clone());
    let variances: Option<Vec<f64>> = channels.iter().map(|ch| ch.average_variance_pu).collect();
    let variances_undefined = channels
        .iter()
        .flat_map(|ch| &ch.parameters)
        .any(|p| p.variance.is_none());

    let artifacts = StudyArtifacts {
        truth: ctx.truth.clone(),
        first_measurement: (0..n_ch).map(|c| ctx.measurement(0, c)).collect::<Result<_, _>>()?,
    };
    Ok(StudyOutput {
        report: StudyReport {
            mode: cfg.mode,
            trials: cfg.trials,
            seed: cfg.seed,
            snr_db: cfg.snr_db,
            c: cfg.c,
            dt: cfg.scenario.dt,
            t_end: cfg.scenario.t_end,
            time_constant_base: cfg.time_constant_base,
            channel_rank_v_e: ranks(&v_e),
            channel_rank_variance: variances.map(|v| ranks(&v)),
            channels,
            selected_channel,
            variances_undefined,
        },
        artifacts,
    })
}

fn aggregate_channel(
    ctx: &StudyContext,
    c: usize,
    calib: &[(f64, f64)],
    infeasible: Option<String>,
    estimators: &Option<Vec<ParameterVector>>,
    trials: &[TrialResult],
    bases: &[f64],
) -> Result<ChannelReport, HarnessError> {
    let cfg = &ctx.cfg;
    let truth = &ctx.truth[c];
    let n_par = ctx.p0.len();
    let mut report = ChannelReport {
        channel: truth.channel.clone(),
        unit: truth.unit.clone(),
        signal_mean: truth.mean(),
        sigma_n: ctx.sigma_n[c],
        infeasible,
        parameters: Vec::new(),
        fim: None,
        average_v_e: f64::INFINITY,
        average_v_e_pu: f64::INFINITY,
        average_variance_pu: None,
        spearman: None,
        crlb_dominated: None,
        convergence: Vec::new(),
    };
    let Some(estimators) = estimators else {
        return Ok(report);
    };

    // Successful outcomes in trial order, per estimator.
    let mut ok: Vec<Vec<&Outcome>> = vec![Vec::new(); estimators.len()];
    for (e, est) in estimators.iter().enumerate() {
        let mut failed = 0;
        for t in trials {
            match &t[c][e] {
                Ok(o) => ok[e].push(o),
                Err(_) => failed += 1,
            }
        }
        if failed as f64 > cfg.failure_limit * cfg.trials as f64 {
            return Err(HarnessError::TooManyFailures {
                channel: truth.channel.to_string(),
                estimator: est.paths().join("+"),
                failed,
                trials: cfg.trials,
                limit: 100.0 * cfg.failure_limit,
            });
        }
        if let Some(Ok(o)) = trials.first().map(|t| &t[c][e]) {
            if let Some(r) = &o.result {
                report.convergence.push(ConvergenceLog {
                    estimator: est.paths().join("+"),
                    sse_history: r.sse_history.clone(),
                    step_norms: r.step_norms.clone(),
                    damping: r.damping.clone(),
                    converged_by: r.converged_by,
                });
            }
        }
    }

    // Per-parameter estimate samples and the averaged nFIM.
    let (samples, fims): (Vec<Vec<f64>>, Vec<FimReport>) = match cfg.mode {
        StudyMode::Single => (0..n_par)
            .map(|k| {
                let est: Vec<f64> = ok[k].iter().map(|o| o.estimates[0]).collect();
                let fim = averaged_fim(ctx, c, &estimators[k], &ok[k], calib[k].1, &bases[k..=k]);
                (est, fim)
            })
            .unzip(),
        StudyMode::Multi => {
            let est = (0..n_par)
                .map(|k| ok[0].iter().map(|o| o.estimates[k]).collect())
                .collect();
            let sd: Vec<f64> = calib.iter().map(|x| x.1).collect();
            (est, vec![averaged_fim_multi(ctx, c, &estimators[0], &ok[0], sd, bases)])
        }
    };

    for k in 0..n_par {
        let truth_k = ctx.true_values[k];
        let est = &samples[k];
        let spec = &ctx.p0.entries[k];
        let (avg_nfim, ncrlb, ncrlb_pu, v_e, v_e_pu) = match cfg.mode {
            StudyMode::Single => {
                let f = &fims[k];
                (f.nfim[0][0], f.ncrlb[0], f.ncrlb_pu[0], Some(f.v_e), Some(f.v_e_pu))
            }
            StudyMode::Multi => {
                let f = &fims[0];
                (f.nfim[k][k], f.ncrlb[k], f.ncrlb_pu[k], None, None)
            }
        };
        let mean_estimate = (!est.is_empty()).then(|| mean(est));
        let variance = sample_variance(est);
        report.parameters.push(ParameterReport {
            path: spec.path.clone(),
            unit: spec.unit.clone(),
            true_value: truth_k,
            initial: spec.value,
            alpha: calib[k].0,
            perturbation: calib[k].0 * truth_k,
            sigma_d: calib[k].1,
            pu_base: bases[k],
            avg_nfim,
            ncrlb,
            ncrlb_pu,
            v_e,
            v_e_pu,
            avg_rel_error_pct: mean_estimate.map(|m| 100.0 * (m - truth_k).abs() / truth_k.abs()),
            mean_abs_rel_error_pct: (!est.is_empty())
                .then(|| 100.0 * mean(&est.iter().map(|p| (p - truth_k).abs()).collect::<Vec<_>>()) / truth_k.abs()),
            mean_estimate,
            variance,
            variance_pu: variance.map(|v| v / (bases[k] * bases[k])),
            rank_v_e: None,
            rank_variance: None,
            completed_trials: match cfg.mode {
                StudyMode::Single => ok[k].len(),
                StudyMode::Multi => ok[0].len(),
            },
            failed_trials: cfg.trials
                - match cfg.mode {
                    StudyMode::Single => ok[k].len(),
                    StudyMode::Multi => ok[0].len(),
                },
        });
    }

    let var_pu: Option<Vec<f64>> = report.parameters.iter().map(|p| p.variance_pu).collect();
    report.average_variance_pu = var_pu.as_ref().map(|v| mean(v));
    report.crlb_dominated = var_pu.as_ref().map(|v| {
        v.iter()
            .zip(&report.parameters)
            .all(|(var, p)| *var >= p.ncrlb_pu)
    });
    match cfg.mode {
        StudyMode::Single => {
            let ve: Vec<f64> = report.parameters.iter().map(|p| p.v_e_pu.unwrap_or(f64::INFINITY)).collect();
            let ve_native: Vec<f64> = report.parameters.iter().map(|p| p.v_e.unwrap_or(f64::INFINITY)).collect();
            report.average_v_e = mean(&ve_native);
            report.average_v_e_pu = mean(&ve);
            let rv = ranks(&ve);
            for (p, r) in report.parameters.iter_mut().zip(&rv) {
                p.rank_v_e = Some(*r);
            }
            if let Some(v) = &var_pu {
                let rs = ranks(v);
                for (p, r) in report.parameters.iter_mut().zip(&rs) {
                    p.rank_variance = Some(*r);
                }
                report.spearman = spearman(&ve, v);
            }
        }
        StudyMode::Multi => {
            let f = fims.into_iter().next().expect("one joint estimator");
            report.average_v_e = f.v_e;
            report.average_v_e_pu = f.v_e_pu;
            report.fim = Some(f);
        }
    }
    Ok(report)
}

fn averaged_fim(
    ctx: &StudyContext,
    c: usize,
    p: &ParameterVector,
    ok: &[&Outcome],
    sigma_d: f64,
    bases: &[f64],
) -> FimReport {
    averaged_fim_multi(ctx, c, p, ok, vec![sigma_d], bases)
}

fn averaged_fim_multi(
    ctx: &StudyContext,
    c: usize,
    p: &ParameterVector,
    ok: &[&Outcome],
    sigma_d: Vec<f64>,
    bases: &[f64],
) -> FimReport {
    let scores: Vec<Vec<f64>> = ok.iter().map(|o| o.scores.clone()).collect();
    let m = if scores.is_empty() {
        DMatrix::zeros(p.len(), p.len())
    } else {
        mean_outer(&scores)
    };
    FimReport::from_matrix(p, m, sigma_d, ctx.sigma_n[c], ok.len(), bases.to_vec())
}
