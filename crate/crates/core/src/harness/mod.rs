//! End-to-end workflows: channel selection followed by a fit, Monte-Carlo
//! coherency studies, perturbation sweeps and report export.

mod algorithm;
mod config;
mod report;
mod stats;
mod study;
mod sweep;

use thiserror::Error;

use crate::dynsim::SimError;
use crate::estimator::EstimatorError;
use crate::fisher::FisherError;
use crate::measure::MeasureError;
use crate::model::{LoadFlowError, ModelError};
use crate::params::ParameterError;

pub use algorithm::{algorithm1, run_algorithm1, CandidateReport, SelectionOptions, SelectionOutcome};
pub use config::{ExcludedAt, ParameterSpec, ScoreNoise, ScenarioConfig, StudyConfig, StudyMode, REFERENCE_PARAMETERS};
pub use report::{export_report, table_csv, write_sweep_csv};
pub use stats::{ranks, spearman};
pub use study::{
    monte_carlo_study, ChannelReport, ConvergenceLog, ParameterReport, StudyArtifacts, StudyContext,
    StudyOutput, StudyReport,
};
pub use sweep::{perturbation_sweep, sweep_scores, SweepPoint};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    LoadFlow(#[from] LoadFlowError),
    #[error(transparent)]
    Parameters(#[from] ParameterError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("no candidate channel is informative about every parameter: {0}")]
    AllChannelsInfeasible(String),
    #[error("{failed} of {trials} trials failed for {estimator} on {channel} (limit {limit:.0}%)")]
    TooManyFailures {
        channel: String,
        estimator: String,
        failed: usize,
        trials: usize,
        limit: f64,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl HarnessError {
    /// Process exit code: 1 configuration, 2 numerical, 3 study threshold.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::Model(_)
            | HarnessError::Parameters(_)
            | HarnessError::Io { .. } => 1,
            HarnessError::Measure(
                MeasureError::Io { .. } | MeasureError::Format { .. } | MeasureError::GridMismatch { .. },
            ) => 1,
            HarnessError::TooManyFailures { .. } => 3,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Runs `f` on a rayon pool with `workers` threads, or on the global pool
/// when `workers` is `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
