//! Versioned block-table description of the detector.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARCH_VERSION: u32 = 1;
pub const MAX_CHANNELS: usize = 128;

/// Shipped block tables.
pub const DEFAULT_ARCH_TOML: &str = include_str!("../../arch/default.toml");
pub const TOY_ARCH_TOML: &str = include_str!("../../arch/toy.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub out: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// `repeat` depthwise-separable blocks; only the first one strides. The
/// last `linear_depthwise` repeats have a linear depthwise conv (no BN, no
/// activation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub out: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default)]
    pub linear_depthwise: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    /// 1x1 channel reduction.
    pub reduce: usize,
    /// Following 3x3 conv.
    pub conv: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub stride: usize,
    pub sizes: Vec<f64>,
    pub variances: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub version: u32,
    pub name: String,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    /// SSH output width; absent means heads read the feature layer directly.
    #[serde(default)]
    pub ssh: Option<usize>,
    pub input: InputSpec,
    pub stem: StemSpec,
    pub feature: FeatureSpec,
    pub anchors: AnchorSpec,
    pub blocks: Vec<BlockSpec>,
}

impl ArchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let a: ArchConfig = toml::from_str(text)?;
        a.validate()?;
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn default_arch() -> Self {
        Self::parse(DEFAULT_ARCH_TOML).expect("shipped default arch is valid")
    }

    pub fn toy() -> Self {
        Self::parse(TOY_ARCH_TOML).expect("shipped toy arch is valid")
    }

    /// Looks up a shipped table by name, else treats `name` as a path.
    pub fn resolve(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_arch()),
            "toy" => Ok(Self::toy()),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ARCH_VERSION {
            return Err(Error::Config(format!(
                "arch version {} unsupported (expected {ARCH_VERSION})",
                self.version
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside (0,1)", self.leaky_slope)));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("bn eps must be positive".into()));
        }
        let mut widths = vec![("input", self.input.channels), ("stem", self.stem.out)];
        widths.extend(self.blocks.iter().map(|b| ("block", b.out)));
        widths.push(("feature.reduce", self.feature.reduce));
        widths.push(("feature.conv", self.feature.conv));
        if let Some(s) = self.ssh {
            widths.push(("ssh", s));
            if s % 4 != 0 {
                return Err(Error::Config(format!("ssh width {s} must be divisible by 4")));
            }
        }
        for (what, c) in widths {
            if c == 0 || c > MAX_CHANNELS {
                return Err(Error::Config(format!(
                    "{what} has {c} channels; widths must lie in [1, {MAX_CHANNELS}]"
                )));
            }
        }
        for b in &self.blocks {
            if b.repeat == 0 || b.linear_depthwise > b.repeat || b.stride == 0 {
                return Err(Error::Config(format!("bad block spec {b:?}")));
            }
        }
        if self.anchors.sizes.is_empty() || self.anchors.stride == 0 {
            return Err(Error::Config("anchor spec needs a stride and at least one size".into()));
        }
        let heads = 4 * self.anchors.sizes.len();
        if heads > MAX_CHANNELS {
            return Err(Error::Config(format!("box head would have {heads} channels")));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("arch serializes");
        hex::encode(Sha256::digest(&canon))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_tables_parse() {
        let d = ArchConfig::default_arch();
        assert_eq!((d.input.width, d.input.height), (160, 120));
        let t = ArchConfig::toy();
        assert_ne!(d.hash(), t.hash());
        assert_eq!(d.hash(), ArchConfig::default_arch().hash());
    }

    #[test]
    fn toml_round_trip() {
        let d = ArchConfig::default_arch();
        assert_eq!(ArchConfig::parse(&d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn channel_cap_enforced() {
        let mut d = ArchConfig::default_arch();
        d.blocks[0].out = 129;
        assert!(matches!(d.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{DEFAULT_ARCH_TOML}\nbogus = 1\n");
        assert!(ArchConfig::parse(&text).is_err());
    }
}
