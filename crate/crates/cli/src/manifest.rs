use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Output file name to SHA-256 of its contents.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    /// Hash of the resolved configuration (includes merged, seeds applied).
    pub config_hash: String,
    /// Config files read, with the hash of each.
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn new(config_hash: String, inputs: BTreeMap<String, String>, seed_override: Option<u64>) -> Self {
        Manifest {
            tool: "tjsim".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: tjsim_core::VERSION.into(),
            config_hash,
            inputs,
            seed_override,
            stages: BTreeMap::new(),
        }
    }

    pub fn read(dir: &Path) -> anyhow::Result<Option<Self>> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p)?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("corrupt {}", p.display()))?))
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    /// Opens `dir` for this config. An existing manifest for a different
    /// config is only replaced with `force`.
    pub fn open(dir: &Path, fresh: Manifest, force: bool) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        match Manifest::read(dir)? {
            Some(old) if old.config_hash == fresh.config_hash && old.seed_override == fresh.seed_override => Ok(old),
            Some(old) if !force => bail!(
                "{} holds outputs of a different config (hash {}); pass --force to overwrite",
                dir.display(),
                &old.config_hash[..12.min(old.config_hash.len())]
            ),
            _ => {
                fresh.write(dir)?;
                Ok(fresh)
            }
        }
    }

    pub fn stage_complete(&self, name: &str) -> bool {
        self.stages.get(name).is_some_and(|s| s.status == StageStatus::Complete)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn changed_config_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let a = Manifest::new("aa".repeat(32), BTreeMap::new(), None);
        let b = Manifest::new("bb".repeat(32), BTreeMap::new(), None);
        Manifest::open(dir.path(), a.clone(), false).unwrap();
        assert_eq!(Manifest::open(dir.path(), a.clone(), false).unwrap(), a);
        let e = Manifest::open(dir.path(), b.clone(), false).unwrap_err();
        assert!(e.to_string().contains("--force"), "{e}");
        assert_eq!(Manifest::open(dir.path(), b.clone(), true).unwrap(), b);
        assert_eq!(Manifest::read(dir.path()).unwrap().unwrap(), b);
    }
}
