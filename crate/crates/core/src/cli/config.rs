use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{AnchorConfig, ArchConfig};
use crate::rawsim::scene::SceneConfig;
use crate::rawsim::{NoiseParams, SynthConfig};
use crate::train::TrainConfig;

/// Every knob a command can read. Loaded from TOML over the defaults, then
/// overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Drives synthesis, network init and training order.
    pub seed: u64,
    /// Shipped table name (`default`, `toy`) or a path to a TOML block table.
    pub arch: String,
    pub scene: SceneConfig,
    pub synth: SynthConfig,
    pub noise: NoiseParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            arch: "default".into(),
            scene: SceneConfig::default(),
            synth: SynthConfig::default(),
            noise: NoiseParams::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Defaults, then the optional file, then a `--seed` flag. The trainer
    /// always follows the master seed.
    pub fn resolve(file: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut c = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            c.seed = s;
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.noise.validate()?;
        self.train.validate()?;
        self.eval.detect_config().validate()?;
        if self.scene.max_faces == 0 {
            return Err(Error::Config("scene.max_faces must be at least 1".into()));
        }
        Ok(())
    }

    pub fn arch_config(&self) -> Result<ArchConfig> {
        ArchConfig::resolve(&self.arch)
    }
}

/// The config as echoed into manifests: the run config plus the resolved
/// architecture identity and anchor layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub run: RunConfig,
    pub arch_hash: String,
    pub anchors: AnchorConfig,
}

impl EffectiveConfig {
    pub fn new(run: &RunConfig) -> Result<Self> {
        let arch = run.arch_config()?;
        Ok(EffectiveConfig {
            run: run.clone(),
            arch_hash: arch.hash(),
            anchors: AnchorConfig::from_arch(&arch),
        })
    }
}
