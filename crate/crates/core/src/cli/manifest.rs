use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::EffectiveConfig;
use super::Command;
use crate::error::Result;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// What a command did: enough to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub invocation: Command,
    pub config: EffectiveConfig,
    /// Output path relative to `--out`, mapped to its sha256.
    pub outputs: BTreeMap<String, String>,
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            walk(root, &p, out)?;
            continue;
        }
        let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        if rel != MANIFEST_FILE {
            out.insert(rel, hex::encode(Sha256::digest(fs::read(&p)?)));
        }
    }
    Ok(())
}

/// sha256 of every file under `dir` except the run manifest.
pub fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
