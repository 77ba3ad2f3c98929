//! Volume container: JSON header line, then little-endian `f32` voxels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::ChunkTensor;
use crate::error::{Error, Result};
use crate::fsutil;

pub const VOLUME_FORMAT: &str = "volrope-volume/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    format: String,
    #[serde(rename = "T")]
    slices: usize,
    #[serde(rename = "Hy")]
    height: usize,
    #[serde(rename = "Wx")]
    width: usize,
    dtype: String,
}

pub fn volume_to_bytes(volume: &ChunkTensor) -> Vec<u8> {
    let header = VolumeHeader {
        format: VOLUME_FORMAT.into(),
        slices: volume.slices(),
        height: volume.height(),
        width: volume.width(),
        dtype: "f32le".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend(fsutil::f32_le_bytes(volume.voxels().data().iter().copied()));
    out
}

pub fn volume_from_bytes(bytes: &[u8]) -> Result<ChunkTensor> {
    let (head, payload) = fsutil::split_header(bytes)?;
    let h: VolumeHeader = serde_json::from_slice(head).map_err(|e| Error::schema(format!("volume header: {e}")))?;
    if h.format != VOLUME_FORMAT || h.dtype != "f32le" {
        return Err(Error::schema(format!(
            "unsupported volume `{}`/`{}`",
            h.format, h.dtype
        )));
    }
    let values = fsutil::f32_le_values(payload)?;
    if values.len() != h.slices * h.height * h.width || values.is_empty() {
        return Err(Error::schema(format!(
            "volume payload holds {} values, header declares {}x{}x{}",
            values.len(),
            h.slices,
            h.height,
            h.width
        )));
    }
    ChunkTensor::from_slices(h.height, h.width, values)
}

pub fn save_volume(path: &Path, volume: &ChunkTensor) -> Result<()> {
    fsutil::atomic_write(path, &volume_to_bytes(volume))
}

pub fn load_volume(path: &Path) -> Result<ChunkTensor> {
    volume_from_bytes(&fsutil::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let v = ChunkTensor::from_slices(2, 3, (0..12).map(|i| i as f64 * 0.25).collect()).unwrap();
        let bytes = volume_to_bytes(&v);
        assert_eq!(volume_from_bytes(&bytes).unwrap(), v);
        assert!(matches!(
            volume_from_bytes(&bytes[..bytes.len() - 4]),
            Err(Error::Schema(_))
        ));
    }
}
