//! Numerical Fisher information for identifying power-system dynamic model
//! parameters from noisy transient measurements.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: study-system data model, the IEEE 9-bus preset, load-flow
//!   initialisation and controller setpoints.
//! - [`dynsim`]: fixed-step RMS-phasor simulator (two-axis machines, IEEEG3
//!   governor, SEXS exciter, switched constant-impedance loads).
//! - [`measure`]: noise sizing from an SNR, artificial measurement synthesis,
//!   Gaussian log-likelihood and sum of squared errors.
//! - [`fisher`]: perturbation-based score, nFIM assembly and averaging,
//!   perturbation calibration, Cramér-Rao bounds and confidence-ellipsoid
//!   volume.
//! - [`estimator`]: bounded Levenberg-Marquardt fit against a black-box
//!   simulator.
//! - [`harness`]: channel selection followed by a fit, Monte-Carlo coherency
//!   studies, perturbation sweeps and report export.

pub mod dynsim;
pub mod estimator;
pub mod fisher;
pub mod harness;
pub mod measure;
pub mod model;
pub mod oracle;
pub mod params;
pub mod seed;
mod serde_float;

pub use estimator::{fit, EstimationResult, FitOptions};
pub use fisher::FimReport;
pub use harness::{StudyConfig, StudyReport};
pub use dynsim::{simulate, ChannelSpec, Quantity, Scenario, Trace};
pub use measure::MeasurementSet;
pub use model::{ieee9_preset, init_load_flow, OperatingPoint, SystemModel};
pub use oracle::SimOracle;
pub use params::{ParameterEntry, ParameterVector};
