//! Network weights on disk: a TOML manifest next to a little-endian f32 blob.
//!
//! `<stem>.toml` records the format version, network geometry, variant and
//! the shape of every parameter; `<stem>.bin` holds the values in the same
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ContextNet, NetworkConfig, Variant};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub variant: Variant,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    pub network: NetworkConfig,
    pub params: Vec<ParamEntry>,
}

/// Extra facts stored alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckpointInfo {
    pub epoch: Option<usize>,
    pub validation_loss: Option<f64>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("toml"), stem.with_extension("bin"))
}

pub fn save(net: &ContextNet, stem: &Path, info: CheckpointInfo) -> Result<()> {
    let (manifest_path, blob_path) = paths(stem);
    let mut params = Vec::new();
    let mut blob = Vec::with_capacity(4 * net.param_count());
    for layer in net.layers() {
        for p in &layer.params {
            params.push(ParamEntry {
                layer: layer.name.clone(),
                shape: p.shape().to_vec(),
            });
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        variant: net.variant(),
        dtype: "f32".into(),
        epoch: info.epoch,
        validation_loss: info.validation_loss,
        network: net.config().clone(),
        params,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
}

pub fn read_manifest(stem: &Path) -> Result<CheckpointManifest> {
    let (manifest_path, _) = paths(stem);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    // Check the version before the rest so newer layouts fail cleanly.
    #[derive(Deserialize)]
    struct Versioned {
        version: u32,
    }
    let v: Versioned =
        toml::from_str(&text).map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
    if v.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: v.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    toml::from_str(&text).map_err(|e| Error::format("checkpoint manifest", e.to_string()))
}

pub fn load(stem: &Path) -> Result<(ContextNet, CheckpointManifest)> {
    let manifest = read_manifest(stem)?;
    if manifest.dtype != "f32" {
        return Err(Error::format(
            "checkpoint manifest",
            format!("unsupported dtype {}", manifest.dtype),
        ));
    }
    let (_, blob_path) = paths(stem);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut net = ContextNet::build(manifest.network.clone(), manifest.variant, 0)?;
    let expected: Vec<Vec<usize>> = net.params().map(|p| p.shape().to_vec()).collect();
    let found: Vec<Vec<usize>> = manifest.params.iter().map(|p| p.shape.clone()).collect();
    if expected != found {
        return Err(Error::format(
            "checkpoint manifest",
            "parameter shapes do not match the network",
        ));
    }
    if blob.len() != 4 * net.param_count() {
        return Err(Error::format(
            "checkpoint blob",
            format!("{} bytes for {} parameters", blob.len(), net.param_count()),
        ));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for p in net.params_mut() {
        for v in p.value.data_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok((net, manifest))
}
