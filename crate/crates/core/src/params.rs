//! Named, bounded parameter vectors.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use thiserror::Error;

use crate::model::{parameter_unit, ModelError, SystemModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParameterError {
    #[error("duplicate parameter path `{0}`")]
    Duplicate(String),
    #[error("parameter `{path}` = {value} outside [{lower}, {upper}]")]
    OutOfBounds {
        path: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("parameter `{0}`: perturbation alpha must be positive")]
    BadAlpha(String),
    #[error("parameter `{0}`: lower bound exceeds upper bound")]
    BadBounds(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("vector length {got} does not match {expected} parameters")]
    Length { expected: usize, got: usize },
}

fn is_neg_inf(v: &f64) -> bool {
    *v == f64::NEG_INFINITY
}

fn is_pos_inf(v: &f64) -> bool {
    *v == f64::INFINITY
}

fn default_alpha() -> f64 {
    0.01
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEntry {
    /// Model path, e.g. `SM1.gov.K_t`.
    pub path: String,
    pub value: f64,
    #[serde(default)]
    pub unit: String,
    #[serde(default = "neg_inf", skip_serializing_if = "is_neg_inf")]
    pub lower: f64,
    #[serde(default = "pos_inf", skip_serializing_if = "is_pos_inf")]
    pub upper: f64,
    /// Relative perturbation used for the numerical score.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Base for per-unit reporting. Defaults to the nominal value, or to the
    /// time-constant base for quantities in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pu_base: Option<f64>,
}

impl ParameterEntry {
    pub fn new(path: impl Into<String>, value: f64) -> Self {
        let path = path.into();
        Self {
            unit: parameter_unit(&path).to_string(),
            path,
            value,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            alpha: default_alpha(),
            pu_base: None,
        }
    }

    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Per-unit base: explicit if configured, `time_constant_base` for
    /// quantities in seconds, otherwise `nominal`.
    pub fn base(&self, nominal: f64, time_constant_base: f64) -> f64 {
        match self.pu_base {
            Some(b) => b,
            None if self.unit == "s" => time_constant_base,
            None => nominal.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector {
    pub entries: Vec<ParameterEntry>,
}

impl ParameterVector {
    pub fn new(entries: Vec<ParameterEntry>) -> Result<Self, ParameterError> {
        let v = Self { entries };
        v.validate()?;
        Ok(v)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Reads the current model values of `paths` with unbounded entries.
    pub fn from_model(model: &SystemModel, paths: &[&str]) -> Result<Self, ParameterError> {
        let entries = paths
            .iter()
            .map(|p| Ok(ParameterEntry::new(*p, model.parameter(p)?)))
            .collect::<Result<Vec<_>, ParameterError>>()?;
        Self::new(entries)
    }

    pub fn validate(&self) -> Result<(), ParameterError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(ParameterError::Duplicate(e.path.clone()));
            }
            if !(e.alpha > 0.0) {
                return Err(ParameterError::BadAlpha(e.path.clone()));
            }
            if e.lower > e.upper {
                return Err(ParameterError::BadBounds(e.path.clone()));
            }
            if !(e.value >= e.lower && e.value <= e.upper) {
                return Err(ParameterError::OutOfBounds {
                    path: e.path.clone(),
                    value: e.value,
                    lower: e.lower,
                    upper: e.upper,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn paths(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.path.as_str()).collect()
    }

    pub fn get(&self, path: &str) -> Option<&ParameterEntry> {
        self.entries.iter().find(|e| e.path == path)
    }

    /// Copy with the values replaced. Bounds are not checked.
    pub fn with_values(&self, values: &[f64]) -> Result<Self, ParameterError> {
        if values.len() != self.len() {
            return Err(ParameterError::Length {
                expected: self.len(),
                got: values.len(),
            });
        }
        let mut out = self.clone();
        for (e, &v) in out.entries.iter_mut().zip(values) {
            e.value = v;
        }
        Ok(out)
    }

    /// Copy with entry `k` scaled by `1 + alpha_k`.
    pub fn perturbed(&self, k: usize, alpha: f64) -> Self {
        let mut out = self.clone();
        out.entries[k].value *= 1.0 + alpha;
        out
    }

    /// Restricts to the entries whose paths are listed, preserving `paths` order.
    pub fn subset(&self, paths: &[&str]) -> Option<Self> {
        let entries = paths
            .iter()
            .map(|p| self.get(p).cloned())
            .collect::<Option<Vec<_>>>()?;
        Some(Self { entries })
    }

    pub fn apply(&self, model: &mut SystemModel) -> Result<(), ModelError> {
        for e in &self.entries {
            model.set_parameter(&e.path, e.value)?;
        }
        Ok(())
    }

    /// Stable key over paths and exact value bits, for caching simulations.
    pub fn cache_key(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for e in &self.entries {
            e.path.hash(&mut h);
            e.value.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ieee9_preset;

    #[test]
    fn rejects_duplicates_and_bad_bounds() {
        let a = ParameterEntry::new("SM1.avr.K", 20.0);
        assert!(matches!(
            ParameterVector::new(vec![a.clone(), a.clone()]),
            Err(ParameterError::Duplicate(_))
        ));
        let b = a.clone().with_bounds(21.0, 30.0);
        assert!(matches!(ParameterVector::new(vec![b]), Err(ParameterError::OutOfBounds { .. })));
        let c = a.with_alpha(0.0);
        assert!(matches!(ParameterVector::new(vec![c]), Err(ParameterError::BadAlpha(_))));
    }

    #[test]
    fn reads_and_applies_model_values() {
        let mut m = ieee9_preset();
        let v = ParameterVector::from_model(&m, &["SM1.gov.T_d", "SM1.avr.K"]).unwrap();
        assert_eq!(v.values(), vec![2.4, 20.0]);
        assert_eq!(v.entries[0].unit, "s");
        v.with_values(&[2.5, 19.0]).unwrap().apply(&mut m).unwrap();
        assert_eq!(m.parameter("SM1.gov.T_d").unwrap(), 2.5);
        assert_eq!(m.parameter("SM1.avr.K").unwrap(), 19.0);
    }

    #[test]
    fn per_unit_base_rules() {
        let t = ParameterEntry::new("SM1.gov.T_d", 2.4);
        assert_eq!(t.base(2.4, 0.02), 0.02);
        let k = ParameterEntry::new("SM1.gov.K_t", 1.5);
        assert_eq!(k.base(1.5, 0.02), 1.5);
        let mut e = k.clone();
        e.pu_base = Some(3.0);
        assert_eq!(e.base(1.5, 0.02), 3.0);
    }

    #[test]
    fn cache_key_tracks_value_bits() {
        let v = ParameterVector::new(vec![ParameterEntry::new("SM1.avr.K", 20.0)]).unwrap();
        let w = v.with_values(&[20.0 + 1e-12]).unwrap();
        assert_eq!(v.cache_key(), v.clone().cache_key());
        assert_ne!(v.cache_key(), w.cache_key());
    }

    #[test]
    fn json_keeps_infinite_bounds() {
        let v = ParameterVector::new(vec![ParameterEntry::new("SM1.avr.K", 20.0)]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: ParameterVector = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
