//! Versioned checkpoint container: a safetensors file whose header carries a
//! single `s2ig` metadata entry holding sorted JSON key/value pairs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "s2ig-checkpoint";
/// Bumped on incompatible layout changes; readers accept any version up to this one.
pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "s2ig";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub version: u32,
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks metadata key {key}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Compatibility(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    metadata: &BTreeMap<String, String>,
    stores: &[&ParamStore],
    extra: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut header = metadata.clone();
    header.insert("format".into(), CHECKPOINT_FORMAT.into());
    header.insert("version".into(), CHECKPOINT_VERSION.to_string());
    header.insert("kind".into(), kind.into());
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);

    let mut tensors = BTreeMap::new();
    for store in stores {
        for (name, t) in store.named_tensors() {
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("parameter {name} appears in two stores")));
            }
        }
    }
    for (name, t) in extra {
        if tensors.insert(name.clone(), t.clone()).is_some() {
            return Err(Error::Checkpoint(format!("tensor {name} stored twice")));
        }
    }
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} is not an s2ig checkpoint", path.display())))?;
    let mut metadata: BTreeMap<String, String> = serde_json::from_str(raw)?;
    if metadata.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!("{}: unknown container format", path.display())));
    }
    let version: u32 = metadata
        .remove("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing container version".into()))?;
    if version > CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "{} was written by container version {version}; this build reads up to {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let kind = metadata.remove("kind").unwrap_or_default();
    metadata.remove("format");
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok(Checkpoint {
        kind,
        version,
        metadata,
        tensors,
    })
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
