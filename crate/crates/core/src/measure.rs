//! Artificial measurements, noise sizing and likelihood functionals.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::dynsim::{read_two_columns, uniform_grid, ChannelSpec, Grid, Trace, TraceError};
use crate::seed;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("signal mean is zero; SNR-based noise sizing is undefined")]
    ZeroMean,
    #[error("trace has no samples")]
    Empty,
    #[error("noise standard deviation must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("time grids differ: measurement {measured:?}, simulation {simulated:?}")]
    GridMismatch { measured: Grid, simulated: Grid },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// `z_i = y_i + e_i` on the grid of the simulated trace it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub channel: ChannelSpec,
    pub unit: String,
    pub t0: f64,
    pub dt: f64,
    pub samples: Vec<f64>,
    pub sigma_n: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Sidecar metadata stored next to the `t,z` CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    channel: ChannelSpec,
    unit: String,
    sigma_n: f64,
    #[serde(default)]
    snr_db: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

impl MeasurementSet {
    pub fn grid(&self) -> Grid {
        Grid {
            t0: self.t0,
            dt: self.dt,
            len: self.samples.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `<path>` as `t,z` CSV and `<path>.json` with the metadata.
    pub fn save(&self, path: &Path) -> Result<(), MeasureError> {
        let io = |source| MeasureError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut text = String::from("t,z\n");
        for (i, z) in self.samples.iter().enumerate() {
            text.push_str(&format!("{},{}\n", self.grid().time(i), z));
        }
        fs::write(path, text).map_err(io)?;
        let meta = Sidecar {
            channel: self.channel.clone(),
            unit: self.unit.clone(),
            sigma_n: self.sigma_n,
            snr_db: self.snr_db,
            seed: self.seed,
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&meta).expect("plain data")).map_err(|source| {
            MeasureError::Io { path: side, source }
        })
    }

    pub fn load(path: &Path) -> Result<Self, MeasureError> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|source| MeasureError::Io {
            path: side.clone(),
            source,
        })?;
        let meta: Sidecar = serde_json::from_str(&text).map_err(|e| MeasureError::Format {
            path: side.clone(),
            message: e.to_string(),
        })?;
        let fmt = |e: TraceError| MeasureError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = fs::File::open(path).map_err(|source| MeasureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let (_, t, z) = read_two_columns(file).map_err(fmt)?;
        let (t0, dt) = uniform_grid(&t).map_err(fmt)?;
        if !(meta.sigma_n > 0.0 && meta.sigma_n.is_finite()) {
            return Err(MeasureError::BadSigma(meta.sigma_n));
        }
        Ok(Self {
            channel: meta.channel,
            unit: meta.unit,
            t0,
            dt,
            samples: z,
            sigma_n: meta.sigma_n,
            snr_db: meta.snr_db,
            seed: meta.seed,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// `|mean(y)| / 10^(snr_db/20)`.
pub fn noise_sigma_from_snr(trace: &Trace, snr_db: f64) -> Result<f64, MeasureError> {
    if trace.is_empty() {
        return Err(MeasureError::Empty);
    }
    let mean = trace.mean();
    if mean == 0.0 {
        return Err(MeasureError::ZeroMean);
    }
    Ok(mean.abs() / 10f64.powf(snr_db / 20.0))
}

/// Adds white Gaussian noise of standard deviation `sigma_n` to `trace`.
pub fn synthesize(trace: &Trace, sigma_n: f64, seed: u64) -> Result<MeasurementSet, MeasureError> {
    let normal = Normal::new(0.0, sigma_n).map_err(|_| MeasureError::BadSigma(sigma_n))?;
    if !(sigma_n > 0.0) {
        return Err(MeasureError::BadSigma(sigma_n));
    }
    let mut rng = seed::rng(seed);
    let samples = trace
        .samples
        .iter()
        .map(|y| y + normal.sample(&mut rng))
        .collect();
    Ok(MeasurementSet {
        channel: trace.channel.clone(),
        unit: trace.unit.clone(),
        t0: trace.t0,
        dt: trace.dt,
        samples,
        sigma_n,
        snr_db: None,
        seed: Some(seed),
    })
}

pub(crate) fn check_grid(z: &MeasurementSet, y: &Trace) -> Result<(), MeasureError> {
    if z.grid().matches(&y.grid()) {
        Ok(())
    } else {
        Err(MeasureError::GridMismatch {
            measured: z.grid(),
            simulated: y.grid(),
        })
    }
}

/// `sum (z_i - y_i)^2`.
pub fn sse(z: &MeasurementSet, y: &Trace) -> Result<f64, MeasureError> {
    check_grid(z, y)?;
    Ok(z
        .samples
        .iter()
        .zip(&y.samples)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Gaussian log-likelihood of `z` given the noiseless trace `y`.
pub fn log_likelihood(z: &MeasurementSet, y: &Trace) -> Result<f64, MeasureError> {
    let s = sse(z, y)?;
    let var = z.sigma_n * z.sigma_n;
    let n = z.len() as f64;
    Ok(-0.5 * n * (2.0 * PI * var).ln() - s / (2.0 * var))
}
