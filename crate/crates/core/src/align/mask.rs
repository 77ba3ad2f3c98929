//! Organ occupancy masks.
//!
//! Dense data is a `u8` label map (`0` background, `k` the k-th listed
//! organ), so organs never overlap. Every mask also carries a
//! `[T, organs]` presence summary used for chunk queries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

use super::sampling::ChunkSpec;

pub const MASK_FORMAT: &str = "volrope-mask/1";
const LABEL_ENCODING: &str = "label-u8";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    dims: [usize; 3],
    organs: Vec<String>,
    presence: Vec<bool>,
    labels: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskHeader {
    format: String,
    /// `[T, Hy, Wx]`
    dims: [usize; 3],
    organs: Vec<String>,
    encoding: String,
    dense: bool,
}

fn scan_labels(dims: [usize; 3], organs: usize, labels: &[u8]) -> Vec<bool> {
    let plane = dims[1] * dims[2];
    let mut presence = vec![false; dims[0] * organs];
    for (t, slice) in labels.chunks(plane).enumerate() {
        for &l in slice {
            if l > 0 {
                presence[t * organs + usize::from(l) - 1] = true;
            }
        }
    }
    presence
}

impl MaskVolume {
    /// Builds a mask from a dense label map, deriving the presence summary.
    pub fn from_labels(dims: [usize; 3], organs: Vec<String>, labels: Vec<u8>) -> Result<Self> {
        if organs.len() > usize::from(u8::MAX) {
            return Err(Error::contract("label masks hold at most 255 organs"));
        }
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::contract(format!(
                "label map has {} voxels, dims {dims:?} need {}",
                labels.len(),
                dims.iter().product::<usize>()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| usize::from(l) > organs.len()) {
            return Err(Error::contract(format!(
                "label {bad} exceeds organ count {}",
                organs.len()
            )));
        }
        let presence = scan_labels(dims, organs.len(), &labels);
        Ok(MaskVolume {
            dims,
            organs,
            presence,
            labels: Some(labels),
        })
    }

    /// Builds a summary-only mask from `presence[t * organs + o]`.
    pub fn from_presence(dims: [usize; 3], organs: Vec<String>, presence: Vec<bool>) -> Result<Self> {
        if presence.len() != dims[0] * organs.len() {
            return Err(Error::contract("presence summary must be [T, organs]"));
        }
        Ok(MaskVolume {
            dims,
            organs,
            presence,
            labels: None,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    pub fn organs(&self) -> &[String] {
        &self.organs
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn present(&self, t: usize, organ: usize) -> bool {
        self.presence[t * self.organs.len() + organ]
    }

    /// Whether the dense data and the summary agree (trivially true without dense data).
    pub fn is_consistent(&self) -> bool {
        self.labels
            .as_ref()
            .is_none_or(|l| scan_labels(self.dims, self.organs.len(), l) == self.presence)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = MaskHeader {
            format: MASK_FORMAT.into(),
            dims: self.dims,
            organs: self.organs.clone(),
            encoding: LABEL_ENCODING.into(),
            dense: self.labels.is_some(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend(self.presence.iter().map(|&p| u8::from(p)));
        if let Some(l) = &self.labels {
            out.extend_from_slice(l);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (head, payload) = fsutil::split_header(bytes)?;
        let h: MaskHeader = serde_json::from_slice(head).map_err(|e| Error::schema(format!("mask header: {e}")))?;
        if h.format != MASK_FORMAT || h.encoding != LABEL_ENCODING {
            return Err(Error::schema(format!(
                "unsupported mask `{}`/`{}`",
                h.format, h.encoding
            )));
        }
        let n_summary = h.dims[0] * h.organs.len();
        let n_dense = if h.dense { h.dims.iter().product() } else { 0 };
        if payload.len() != n_summary + n_dense {
            return Err(Error::schema(format!(
                "mask payload is {} bytes, expected {}",
                payload.len(),
                n_summary + n_dense
            )));
        }
        let presence = payload[..n_summary].iter().map(|&b| b != 0).collect();
        let mask = if h.dense {
            let m = Self::from_labels(h.dims, h.organs, payload[n_summary..].to_vec())
                .map_err(|e| Error::schema(e.to_string()))?;
            if m.presence != presence {
                return Err(Error::schema("mask presence summary disagrees with dense labels"));
            }
            m
        } else {
            Self::from_presence(h.dims, h.organs, presence)?
        };
        Ok(mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }
}

/// Organs whose summary is set for any slice in `[s, s + l)`, in mask order.
pub fn organs_in_chunk(mask: &MaskVolume, chunk: &ChunkSpec) -> Result<Vec<String>> {
    if chunk.len == 0 || chunk.end() > mask.slices() {
        return Err(Error::contract(format!(
            "chunk {}..{} outside 0..{}",
            chunk.start,
            chunk.end(),
            mask.slices()
        )));
    }
    Ok(mask
        .organs
        .iter()
        .enumerate()
        .filter(|(o, _)| (chunk.start..chunk.end()).any(|t| mask.present(t, *o)))
        .map(|(_, n)| n.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn organs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("O{i}")).collect()
    }

    #[test]
    fn empty_mask_has_no_organs() {
        let m = MaskVolume::from_labels([4, 2, 2], organs(2), vec![0; 16]).unwrap();
        assert!(organs_in_chunk(&m, &ChunkSpec { start: 0, len: 4 }).unwrap().is_empty());
    }

    #[test]
    fn window_is_half_open() {
        let mut labels = vec![0u8; 8 * 4];
        labels[5 * 4 + 2] = 1; // organ 0 only at slice 5
        let m = MaskVolume::from_labels([8, 2, 2], organs(1), labels).unwrap();
        assert_eq!(
            organs_in_chunk(&m, &ChunkSpec { start: 2, len: 4 }).unwrap(),
            vec!["O0"]
        );
        assert!(organs_in_chunk(&m, &ChunkSpec { start: 1, len: 4 }).unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_chunk_is_rejected() {
        let m = MaskVolume::from_labels([4, 1, 1], organs(1), vec![0; 4]).unwrap();
        assert!(organs_in_chunk(&m, &ChunkSpec { start: 2, len: 3 }).is_err());
    }

    #[test]
    fn container_round_trip_and_tamper_detection() {
        let labels = vec![0, 1, 2, 0, 0, 0, 2, 2];
        let m = MaskVolume::from_labels([2, 2, 2], organs(2), labels).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(MaskVolume::from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        let summary_start = bad.iter().position(|&b| b == b'\n').unwrap() + 1;
        bad[summary_start] ^= 1;
        assert!(matches!(MaskVolume::from_bytes(&bad), Err(Error::Schema(_))));
        bad.pop();
        assert!(MaskVolume::from_bytes(&bad).is_err());
    }
}
