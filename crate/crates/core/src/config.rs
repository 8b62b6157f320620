//! Run configuration: every module config in one JSON document, with
//! dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::satr::Variant;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Adjacent slices on each side of the key slice.
    pub radius: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            radius: 1,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when
    /// possible and as bare strings otherwise; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = self.to_json();
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CoreError::config(format!("override {item:?} is not key=value")))?;
            let mut node = &mut doc;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| CoreError::config(format!("unknown config key {key:?}")))?;
            }
            *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        serde_json::from_value(doc).map_err(|e| CoreError::config(e.to_string()))
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.model.satr.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate(self.radius)?;
        self.model.validate(self.radius)?;
        self.train.validate()?;
        let deepest = 1usize << self.model.backbone.channels.len();
        if self.synth.height % deepest != 0 || self.synth.width % deepest != 0 {
            return Err(CoreError::config(format!(
                "image size {}x{} is not divisible by the deepest downsampling ratio {deepest}",
                self.synth.height, self.synth.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_and_reject_unknown_keys() {
        let cfg = RunConfig::default()
            .with_overrides(&["train.steps=10".into(), "model.satr.variant=naive".into()])
            .unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.model.satr.variant, Variant::Naive);
        assert!(RunConfig::default().with_overrides(&["train.nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.steps=-1".into()]).is_err());
    }

    #[test]
    fn unknown_fields_in_files_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
