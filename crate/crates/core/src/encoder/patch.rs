use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

use super::config::EncoderConfig;

/// A `[slices, height, width]` block of normalized intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTensor {
    voxels: Tensor,
}

impl ChunkTensor {
    pub fn new(voxels: Tensor) -> Result<Self> {
        if voxels.rank() != 3 {
            return Err(Error::contract(format!(
                "chunk must be [slices, height, width], got {:?}",
                voxels.shape()
            )));
        }
        Ok(ChunkTensor { voxels })
    }

    pub fn from_slices(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let plane = height * width;
        if plane == 0 || !data.len().is_multiple_of(plane) {
            return Err(Error::contract("voxel count is not a whole number of slices"));
        }
        Self::new(Tensor::new(vec![data.len() / plane, height, width], data)?)
    }

    pub fn slices(&self) -> usize {
        self.voxels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.voxels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.voxels.shape()[2]
    }

    pub fn voxels(&self) -> &Tensor {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let plane = self.height() * self.width();
        &self.voxels.data()[z * plane..(z + 1) * plane]
    }

    /// Copy of slices `start..start + len`.
    pub fn slab(&self, start: usize, len: usize) -> Result<ChunkTensor> {
        if len == 0 || start + len > self.slices() {
            return Err(Error::contract(format!(
                "slab {start}..{} outside 0..{}",
                start + len,
                self.slices()
            )));
        }
        let plane = self.height() * self.width();
        let data = self.voxels.data()[start * plane..(start + len) * plane].to_vec();
        ChunkTensor::from_slices(self.height(), self.width(), data)
    }
}

/// How a chunk is extended to a multiple of the z patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// Cycle through the existing slices.
    #[default]
    Repeat,
    /// Append all-zero slices.
    Zero,
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repeat" => Ok(PaddingMode::Repeat),
            "zero" => Ok(PaddingMode::Zero),
            other => Err(Error::config(format!("unknown padding mode `{other}`"))),
        }
    }
}

/// Pads to `ceil(l / multiple) * multiple` slices.
pub fn pad_slices(chunk: &ChunkTensor, mode: PaddingMode, multiple: usize) -> Result<ChunkTensor> {
    if multiple == 0 {
        return Err(Error::config("padding multiple must be positive"));
    }
    let l = chunk.slices();
    let target = l.div_ceil(multiple) * multiple;
    if target == l {
        return Ok(chunk.clone());
    }
    let plane = chunk.height() * chunk.width();
    let mut data = Vec::with_capacity(target * plane);
    data.extend_from_slice(chunk.voxels.data());
    for z in l..target {
        match mode {
            PaddingMode::Repeat => data.extend_from_slice(chunk.slice(z % l)),
            PaddingMode::Zero => data.resize(data.len() + plane, 0.0),
        }
    }
    ChunkTensor::from_slices(chunk.height(), chunk.width(), data)
}

/// Linear map of raw values from `[lo, hi]` onto `[-1, 1]`, clamping outliers.
pub fn normalize_intensity(values: &mut [f64], lo: f64, hi: f64) {
    let span = hi - lo;
    for v in values {
        *v = (2.0 * (*v - lo) / span - 1.0).clamp(-1.0, 1.0);
    }
}

/// Tokens of one encoded sequence.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[L, C]`
    pub tokens: Tensor,
    /// `0..L` in flattening order.
    pub positions: Vec<usize>,
    /// `true` marks a token excluded from attention keys and pooling.
    pub pad_mask: Vec<bool>,
}

/// Cuts a padded chunk into non-overlapping `patch_z x patch_xy x patch_xy`
/// patches, z-major then y then x. Returns `[L, patch_volume]`.
pub fn patchify(chunk: &ChunkTensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let (pz, pxy) = (cfg.patch_z, cfg.patch_xy);
    let (l, h, w) = (chunk.slices(), chunk.height(), chunk.width());
    if h != cfg.in_plane_size || w != cfg.in_plane_size {
        return Err(Error::config(format!(
            "chunk in-plane size {h}x{w} does not match configured {}",
            cfg.in_plane_size
        )));
    }
    if h % pxy != 0 || w % pxy != 0 {
        return Err(Error::config(format!(
            "in-plane size {h}x{w} not divisible by patch {pxy}"
        )));
    }
    if l % pz != 0 {
        return Err(Error::contract(format!(
            "chunk has {l} slices, not a multiple of patch_z {pz}; pad it first"
        )));
    }
    let (nz, ny, nx) = (l / pz, h / pxy, w / pxy);
    let pv = cfg.patch_volume();
    let src = chunk.voxels.data();
    let mut out = Vec::with_capacity(nz * ny * nx * pv);
    for zi in 0..nz {
        for yi in 0..ny {
            for xi in 0..nx {
                for dz in 0..pz {
                    for dy in 0..pxy {
                        let start = ((zi * pz + dz) * h + yi * pxy + dy) * w + xi * pxy;
                        out.extend_from_slice(&src[start..start + pxy]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![nz * ny * nx, pv], out)
}
