//! Training pairs: a sampled, padded chunk and its composed description.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{pad_slices, ChunkTensor, PaddingMode};
use crate::error::{Error, Result};

use super::compose::compose_description;
use super::findings::FindingsRecord;
use super::mask::{organs_in_chunk, MaskVolume};
use super::registry::OrganRegistry;
use super::sampling::{sample_chunk, ChunkSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub spec: ChunkSpec,
    /// Slices `spec.start..spec.end()`, repeat-padded to a multiple of the z patch.
    pub chunk: ChunkTensor,
    pub text: String,
}

/// Chunk and description for a fixed window.
pub fn pair_for_window(
    volume: &ChunkTensor,
    mask: &MaskVolume,
    record: &FindingsRecord,
    registry: &OrganRegistry,
    spec: ChunkSpec,
    patch_z: usize,
    padding: PaddingMode,
) -> Result<TrainingPair> {
    let [t, h, w] = mask.dims();
    if volume.slices() != t || volume.height() != h || volume.width() != w {
        return Err(Error::contract(format!(
            "volume {}x{}x{} and mask {t}x{h}x{w} disagree",
            volume.slices(),
            volume.height(),
            volume.width()
        )));
    }
    let organs = organs_in_chunk(mask, &spec)?;
    let chunk = pad_slices(&volume.slab(spec.start, spec.len)?, padding, patch_z)?;
    Ok(TrainingPair {
        spec,
        chunk,
        text: compose_description(record, &organs, registry),
    })
}

/// Samples a window, slices and repeat-pads the volume, and composes its text.
pub fn build_training_pair<R: Rng + ?Sized>(
    volume: &ChunkTensor,
    mask: &MaskVolume,
    record: &FindingsRecord,
    registry: &OrganRegistry,
    rng: &mut R,
    patch_z: usize,
) -> Result<TrainingPair> {
    let spec = sample_chunk(mask.slices(), rng)?;
    pair_for_window(volume, mask, record, registry, spec, patch_z, PaddingMode::Repeat)
}

/// One line of the composed-pairs audit dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub study_id: String,
    pub s: usize,
    pub l: usize,
    pub text: String,
}

impl PairRecord {
    pub fn new(study_id: &str, pair: &TrainingPair) -> Self {
        PairRecord {
            study_id: study_id.to_string(),
            s: pair.spec.start,
            l: pair.spec.len,
            text: pair.text.clone(),
        }
    }
}

/// Serializes records as JSON lines.
pub fn pairs_to_jsonl(records: &[PairRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}
