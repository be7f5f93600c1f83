//! Run configuration read from JSON. Every section and field is optional and
//! falls back to the defaults below; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::GridSpec;
use crate::detector::NetworkConfig;
use crate::error::{Error, Result};
use crate::experiment::ProbeConfig;
use crate::lidar_sim::{LidarSpec, SceneConfig};
use crate::train::{EvalConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub lidar: LidarSpec,
    pub scene: SceneConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    /// Parses JSON; errors name the offending key path, e.g. `train.lambda_adv`.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                other => other,
            })
        };
        section("grid", self.grid.validate())?;
        section("lidar", self.lidar.validate())?;
        section("network", self.network.validate())?;
        section("train", self.train.validate())?;
        section("eval", self.eval.validate())?;
        self.grid.strided_dims(self.network.stride()).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("grid/network: {m}")),
            other => other,
        })?;
        if self.probe.steps == 0 || self.probe.batch_size == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe: steps, batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}
