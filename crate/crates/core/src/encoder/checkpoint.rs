//! Checkpoint container: one JSON manifest line (config plus the ordered
//! parameter list with shapes) followed by little-endian `f32` values of
//! every parameter in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::numkernel::{ParamStore, Tensor};

use super::config::EncoderConfig;
use super::model::DualEncoder;

pub const FORMAT: &str = "volrope-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: EncoderConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn to_bytes(model: &DualEncoder, step: u64) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        step,
    };
    let mut bytes = serde_json::to_vec(&manifest).map_err(|e| Error::schema(e.to_string()))?;
    bytes.push(b'\n');
    for (_, t) in model.params().iter() {
        bytes.extend(fsutil::f32_le_bytes(t.data().iter().copied()));
    }
    Ok(bytes)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(DualEncoder, u64)> {
    let (header, payload) = fsutil::split_header(bytes)?;
    let manifest: Manifest =
        serde_json::from_slice(header).map_err(|e| Error::schema(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::schema(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let values = fsutil::f32_le_values(payload)?;
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if total != values.len() {
        return Err(Error::schema(format!(
            "manifest declares {total} values, payload holds {}",
            values.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        store.insert(
            p.name.clone(),
            Tensor::new(p.shape.clone(), values[offset..offset + n].to_vec())?,
        );
        offset += n;
    }
    Ok((DualEncoder::from_parts(manifest.config, store)?, manifest.step))
}

pub fn save(path: &Path, model: &DualEncoder, step: u64) -> Result<()> {
    fsutil::atomic_write(path, &to_bytes(model, step)?)
}

pub fn load(path: &Path) -> Result<(DualEncoder, u64)> {
    from_bytes(&fsutil::read(path)?)
}

/// Rounds every parameter through `f32`, matching what a save/load cycle yields.
pub fn quantize_to_f32(model: &mut DualEncoder) {
    for (_, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}
