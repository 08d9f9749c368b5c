//! Run configuration: defaults, then the JSON file, then command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mvseg_core::eval::{EvalData, EvalProtocol};
use mvseg_core::model::ModelConfig;
use mvseg_core::scenegen::SceneGenConfig;
use mvseg_core::training::{DataConfig, TrainConfig};
use mvseg_service::ServiceConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenes written by gen-data.
    pub scenes: GenData,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalData,
    pub protocol: EvalProtocol,
    pub service: ServiceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenData {
    pub scene: SceneGenConfig,
    pub count: usize,
    pub noise_scale: f64,
    pub low_conf_fraction: f64,
}

impl Default for GenData {
    fn default() -> Self {
        Self {
            scene: SceneGenConfig::default(),
            count: 8,
            noise_scale: 0.02,
            low_conf_fraction: 0.15,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validate every section that a command may use.
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}
