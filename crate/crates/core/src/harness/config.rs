use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::dynsim::{ChannelSpec, Event, Integrator, Quantity, Scenario};
use crate::estimator::FitOptions;
use crate::model::SystemModel;
use crate::params::{ParameterEntry, ParameterVector};

/// How the study fits its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    /// One estimator per parameter; the others stay fixed.
    #[default]
    Single,
    /// One estimator for all parameters jointly.
    Multi,
}

/// Value held by parameters that are not being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcludedAt {
    #[default]
    True,
    Initial,
}

/// Measurement the nFIM score is evaluated against at the fitted values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNoise {
    /// A fresh noise realization around the trace at the fitted values.
    #[default]
    Independent,
    /// The trial's own measurement set, the one the fit was run on.
    Trial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub path: String,
    /// Starting point `p0` of every fit.
    pub initial: f64,
    /// Value used to generate the artificial measurements. Defaults to the
    /// system model's value.
    #[serde(default, rename = "true", skip_serializing_if = "Option::is_none")]
    pub true_value: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    /// Fixed relative perturbation; calibrated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pu_base: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub integrator: Integrator,
    /// Explicit events. When absent, every switched load block is energized
    /// at its configured time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<Event>>,
}

fn default_t_end() -> f64 {
    20.0
}

fn default_dt() -> f64 {
    1e-3
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            t_end: default_t_end(),
            dt: default_dt(),
            integrator: Integrator::default(),
            events: None,
        }
    }
}

fn default_system() -> String {
    "ieee9".into()
}
fn default_snr() -> f64 {
    80.0
}
fn default_c() -> f64 {
    1.05
}
fn default_trials() -> usize {
    100
}
fn default_realizations() -> usize {
    100
}
fn default_tc_base() -> f64 {
    0.02
}
fn default_failure_limit() -> f64 {
    0.1
}
fn default_alpha_max() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// `ieee9` or a path to a system TOML file.
    #[serde(default = "default_system")]
    pub system: String,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    /// Candidate measurement channels.
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub mode: StudyMode,
    #[serde(default)]
    pub excluded_at: ExcludedAt,
    #[serde(default)]
    pub score_noise: ScoreNoise,
    #[serde(default = "default_snr")]
    pub snr_db: f64,
    /// Visibility factor: the calibrated perturbation makes the difference
    /// curve's standard deviation exceed `c * sigma_n`.
    #[serde(default = "default_c")]
    pub c: f64,
    /// Upper end of the perturbation search grid.
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Noise realizations averaged by `fim` and channel selection.
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    /// Per-unit base for parameters in seconds.
    #[serde(default = "default_tc_base")]
    pub time_constant_base: f64,
    /// Largest tolerated fraction of failed trials.
    #[serde(default = "default_failure_limit")]
    pub failure_limit: f64,
    #[serde(default)]
    pub fit: FitOptions,
    pub parameters: Vec<ParameterSpec>,
}

/// The five identified parameters of SM1 with their starting points.
pub const REFERENCE_PARAMETERS: [(&str, f64, f64); 5] = [
    ("SM1.avr.K", 20.0, 18.5881),
    ("SM1.gov.sigma", 0.04, 0.0376),
    ("SM1.gov.delta", 0.8, 0.8561),
    ("SM1.gov.K_t", 1.5, 1.5287),
    ("SM1.gov.T_d", 2.4, 2.6232),
];

impl StudyConfig {
    /// Five-parameter study on the 9-bus load-energization transient.
    pub fn reference(mode: StudyMode, channels: Vec<ChannelSpec>) -> Self {
        Self {
            system: default_system(),
            scenario: ScenarioConfig::default(),
            channels,
            mode,
            excluded_at: ExcludedAt::True,
            score_noise: ScoreNoise::Independent,
            snr_db: default_snr(),
            c: default_c(),
            alpha_max: 10.0,
            trials: default_trials(),
            seed: 1,
            realizations: default_realizations(),
            time_constant_base: default_tc_base(),
            failure_limit: default_failure_limit(),
            fit: FitOptions::default(),
            parameters: REFERENCE_PARAMETERS
                .iter()
                .map(|&(path, truth, p0)| ParameterSpec {
                    path: path.into(),
                    initial: p0,
                    true_value: Some(truth),
                    lower: 0.5 * truth,
                    upper: 1.5 * truth,
                    alpha: None,
                    pu_base: None,
                })
                .collect(),
        }
    }

    pub fn reference_single() -> Self {
        Self::reference(StudyMode::Single, vec![ChannelSpec::machine("SM1", Quantity::OmegaM)])
    }

    pub fn reference_multi() -> Self {
        Self::reference(
            StudyMode::Multi,
            vec![
                ChannelSpec::machine("SM1", Quantity::OmegaM),
                ChannelSpec::machine("SM1", Quantity::Pe),
            ],
        )
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("study config is plain data")
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // Relative system paths resolve against the config's directory.
        if cfg.system != "ieee9" {
            let p = PathBuf::from(&cfg.system);
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.system = dir.join(p).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.trials < 1 {
            return bad("trials must be at least 1".into());
        }
        if self.channels.is_empty() {
            return bad("at least one candidate channel is required".into());
        }
        if self.parameters.is_empty() {
            return bad("at least one parameter is required".into());
        }
        if !(self.c >= 1.0) {
            return bad(format!("c must be at least 1, got {}", self.c));
        }
        if !(self.alpha_max >= 1e-3) {
            return bad(format!("alpha_max must be at least 0.001, got {}", self.alpha_max));
        }
        if !(self.time_constant_base > 0.0) {
            return bad("time_constant_base must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.failure_limit) {
            return bad("failure_limit must lie in [0, 1]".into());
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite".into());
        }
        if self.realizations < 1 {
            return bad("realizations must be at least 1".into());
        }
        for s in &self.parameters {
            if !(s.lower <= s.initial && s.initial <= s.upper) {
                return bad(format!(
                    "{}: initial value {} outside [{}, {}]",
                    s.path, s.initial, s.lower, s.upper
                ));
            }
            if let Some(a) = s.alpha {
                if !(a > 0.0) {
                    return bad(format!("{}: alpha must be positive", s.path));
                }
            }
        }
        self.initial_vector()?;
        Ok(())
    }

    pub fn resolve_system(&self) -> Result<SystemModel, HarnessError> {
        Ok(SystemModel::resolve(&self.system, None)?)
    }

    /// System model with every parameter at its true value.
    pub fn truth_model(&self) -> Result<SystemModel, HarnessError> {
        let mut m = self.resolve_system()?;
        for s in &self.parameters {
            if let Some(v) = s.true_value {
                m.set_parameter(&s.path, v)?;
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn true_values(&self, truth: &SystemModel) -> Result<Vec<f64>, HarnessError> {
        self.parameters
            .iter()
            .map(|s| Ok(truth.parameter(&s.path)?))
            .collect()
    }

    pub fn build_scenario(&self, model: &SystemModel) -> Scenario {
        let base = match &self.scenario.events {
            Some(events) => Scenario {
                events: events.clone(),
                ..Scenario::steady(self.channels.clone())
            },
            None => Scenario::load_energization(model, self.channels.clone()),
        };
        Scenario {
            integrator: self.scenario.integrator,
            ..base.with_grid(self.scenario.t_end, self.scenario.dt)
        }
    }

    /// Starting vector, bounds and explicit alphas (placeholder alpha where
    /// calibration is pending).
    pub fn initial_vector(&self) -> Result<ParameterVector, HarnessError> {
        let entries = self
            .parameters
            .iter()
            .map(|s| {
                let mut e = ParameterEntry::new(s.path.clone(), s.initial).with_bounds(s.lower, s.upper);
                if let Some(a) = s.alpha {
                    e.alpha = a;
                }
                e.pu_base = s.pu_base;
                e
            })
            .collect();
        Ok(ParameterVector::new(entries)?)
    }
}
