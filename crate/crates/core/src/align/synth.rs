//! Synthetic studies with a learnable link between appearance and text.
//!
//! Each placed organ is an axis-aligned ellipsoid at a fixed in-plane spot
//! (its identity) whose intensity and texture encode its status. The
//! findings sentence is a deterministic function of (organ, status).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ChunkTensor;
use crate::error::{Error, Result};

use super::findings::{FindingsRecord, OrganFinding, Status};
use super::mask::MaskVolume;
use super::registry::OrganRegistry;

/// Organs the synthesizer can place, each with a fixed in-plane cell of a 3x4 grid.
pub const SYNTH_ORGANS: [&str; 12] = [
    "Aorta",
    "Esophagus",
    "Heart",
    "Kidney",
    "Liver",
    "Lung",
    "Pancreas",
    "Spleen",
    "Stomach",
    "Thyroid gland",
    "Trachea",
    "Urinary bladder",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub slices_min: usize,
    pub slices_max: usize,
    pub in_plane: usize,
    /// Organs placed per study.
    pub organ_count: usize,
    /// Shortest organ z-extent in slices.
    pub organ_min_extent: usize,
    /// Amplitude of the uniform background and per-voxel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            slices_min: 32,
            slices_max: 96,
            in_plane: 32,
            organ_count: 5,
            organ_min_extent: 8,
            noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices_min == 0 || self.slices_min > self.slices_max {
            return Err(Error::config("synth slice range must satisfy 0 < min <= max"));
        }
        if self.in_plane < 8 {
            return Err(Error::config("synth in-plane size must be at least 8"));
        }
        if self.organ_count > SYNTH_ORGANS.len() {
            return Err(Error::config(format!(
                "synth organ_count {} exceeds the {} placeable organs",
                self.organ_count,
                SYNTH_ORGANS.len()
            )));
        }
        if self.organ_min_extent == 0 {
            return Err(Error::config("organ_min_extent must be positive"));
        }
        if !(self.noise.is_finite() && (0.0..=0.5).contains(&self.noise)) {
            return Err(Error::config("synth noise must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

/// Findings sentence for a placed organ.
pub fn findings_template(organ: &str, status: Status) -> String {
    match status {
        Status::Normal => format!("{organ} has normal size and homogeneous attenuation."),
        Status::Abnormal => format!("{organ} shows a hyperdense heterogeneous lesion."),
        Status::NotExamined => super::findings::NOT_EXAMINED.to_string(),
    }
}

fn intensity(status: Status) -> f64 {
    match status {
        Status::Normal => 0.2,
        Status::Abnormal => 0.75,
        Status::NotExamined => -0.35,
    }
}

/// One placed organ.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub organ: &'static str,
    pub status: Status,
    pub z_start: usize,
    pub z_end: usize,
}

/// Generates `(volume, mask, record)`. Volumes hold intensities in `[-1, 1]`.
pub fn synth_study<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SynthConfig,
    registry: &OrganRegistry,
) -> Result<(ChunkTensor, MaskVolume, FindingsRecord)> {
    cfg.validate()?;
    let t = rng.random_range(cfg.slices_min..=cfg.slices_max);
    let n = cfg.in_plane;
    let plane = n * n;

    let mut chosen: Vec<usize> = (0..SYNTH_ORGANS.len()).collect();
    for i in 0..cfg.organ_count {
        let j = rng.random_range(i..chosen.len());
        chosen.swap(i, j);
    }
    let mut chosen = chosen[..cfg.organ_count].to_vec();
    chosen.sort_unstable();

    let mut placements = Vec::with_capacity(chosen.len());
    for &k in &chosen {
        let status = Status::ALL[rng.random_range(0..3)];
        let max_extent = (t / 2).max(cfg.organ_min_extent).min(t);
        let min_extent = cfg.organ_min_extent.min(max_extent);
        let extent = rng.random_range(min_extent..=max_extent);
        let z_start = rng.random_range(0..=t - extent);
        placements.push(Placement {
            organ: SYNTH_ORGANS[k],
            status,
            z_start,
            z_end: z_start + extent,
        });
    }

    let mut voxels: Vec<f64> = (0..t * plane)
        .map(|_| -0.8 + cfg.noise * rng.random_range(-1.0..1.0))
        .collect();
    let mut labels = vec![0u8; t * plane];
    let cell_h = n as f64 / 3.0;
    let cell_w = n as f64 / 4.0;
    let radius = 0.4 * cell_h.min(cell_w);
    for (label, (p, &k)) in placements.iter().zip(&chosen).enumerate() {
        let (cy, cx) = (((k / 4) as f64 + 0.5) * cell_h, ((k % 4) as f64 + 0.5) * cell_w);
        let zc = (p.z_start + p.z_end) as f64 / 2.0;
        let rz = (p.z_end - p.z_start) as f64 / 2.0;
        let base = intensity(p.status);
        for z in p.z_start..p.z_end {
            let dz = (z as f64 + 0.5 - zc) / rz;
            let r = radius * (1.0 - dz * dz).max(0.0).sqrt().max(0.5);
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let texture = if p.status == Status::Abnormal && (x + y + z) % 2 == 0 {
                        0.2
                    } else {
                        0.0
                    };
                    let idx = z * plane + y * n + x;
                    voxels[idx] = (base + texture + cfg.noise * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0);
                    labels[idx] = u8::try_from(label + 1).expect("at most 12 organs");
                }
            }
        }
    }

    let organs = placements.iter().map(|p| p.organ.to_string()).collect();
    let mask = MaskVolume::from_labels([t, n, n], organs, labels)?;
    let mut record = FindingsRecord::new(None);
    for name in registry.names() {
        let finding = match placements.iter().find(|p| p.organ == name) {
            Some(p) => OrganFinding {
                status: p.status,
                findings: findings_template(name, p.status),
            },
            None => OrganFinding::not_examined(),
        };
        record.insert(registry, name, finding)?;
    }
    let volume = ChunkTensor::from_slices(n, n, voxels)?;
    Ok((volume, mask, record))
}
