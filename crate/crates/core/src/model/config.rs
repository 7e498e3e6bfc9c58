//! System config files are TOML documents that mirror [`SystemModel`]
//! field-for-field. `ieee9` names the builtin preset.

use super::{ieee9_preset, ModelError, SystemModel};
use std::path::Path;

impl SystemModel {
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let model: SystemModel = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("system model serialises to TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    /// `ieee9` or a path to a system TOML file. Relative paths are resolved
    /// against `base_dir` when given.
    pub fn resolve(reference: &str, base_dir: Option<&Path>) -> Result<Self, ModelError> {
        if reference == "ieee9" {
            return Ok(ieee9_preset());
        }
        let p = Path::new(reference);
        match base_dir {
            Some(dir) if p.is_relative() => Self::load(&dir.join(p)),
            _ => Self::load(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preset_round_trips_through_toml() {
        let m = ieee9_preset();
        let back = SystemModel::from_toml_str(&m.to_toml_string()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn unknown_bus_reference_is_rejected_on_parse() {
        let mut m = ieee9_preset();
        m.branches[0].to = 42;
        let err = SystemModel::from_toml_str(&m.to_toml_string()).unwrap_err();
        assert!(matches!(err, ModelError::Invalid(_)));
    }

    proptest! {
        #[test]
        fn perturbed_models_round_trip(
            k in 1.0f64..100.0,
            sigma in 0.001f64..0.2,
            h in 0.5f64..30.0,
            load in 0.0f64..300.0,
        ) {
            let mut m = ieee9_preset();
            m.set_parameter("SM1.avr.K", k).unwrap();
            m.set_parameter("SM2.gov.sigma", sigma).unwrap();
            m.set_parameter("SM3.H", h).unwrap();
            m.loads[0].p_nom = load;
            let back = SystemModel::from_toml_str(&m.to_toml_string()).unwrap();
            prop_assert_eq!(m, back);
        }
    }
}
