//! Study collections on disk: `manifest.json` plus `<id>.vol`, `<id>.mask`
//! and `<id>.json` per study.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ChunkTensor;
use crate::error::{Error, Result};
use crate::fsutil;

use super::findings::{parse_findings, FindingsRecord};
use super::mask::MaskVolume;
use super::registry::OrganRegistry;
use super::synth::{synth_study, SynthConfig};
use super::volume::{load_volume, save_volume};

pub const DATASET_FORMAT: &str = "volrope-dataset/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub id: String,
    pub volume: ChunkTensor,
    pub mask: MaskVolume,
    pub record: FindingsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub studies: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

/// `count` synthetic studies; study `i` uses its own stream of the seeded generator.
pub fn synth_dataset(count: usize, seed: u64, cfg: &SynthConfig, registry: &OrganRegistry) -> Result<Vec<Study>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (volume, mask, record) = synth_study(&mut rng, cfg, registry)?;
            Ok(Study {
                id: format!("synth_{i:04}"),
                volume,
                mask,
                record,
            })
        })
        .collect()
}

pub fn write_dataset(
    dir: &Path,
    studies: &[Study],
    registry: &OrganRegistry,
    seed: Option<u64>,
    synth: Option<SynthConfig>,
) -> Result<DatasetManifest> {
    for s in studies {
        save_volume(&dir.join(format!("{}.vol", s.id)), &s.volume)?;
        s.mask.save(&dir.join(format!("{}.mask", s.id)))?;
        fsutil::atomic_write(
            &dir.join(format!("{}.json", s.id)),
            s.record.to_json(registry).as_bytes(),
        )?;
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        studies: studies.iter().map(|s| s.id.clone()).collect(),
        seed,
        synth,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::schema(e.to_string()))?;
    fsutil::atomic_write(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = fsutil::read(&dir.join("manifest.json"))?;
    let m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::schema(format!("dataset manifest: {e}")))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::schema(format!("unsupported dataset format `{}`", m.format)));
    }
    Ok(m)
}

pub fn read_study(dir: &Path, id: &str, registry: &OrganRegistry) -> Result<Study> {
    let volume = load_volume(&dir.join(format!("{id}.vol")))?;
    let mask = MaskVolume::load(&dir.join(format!("{id}.mask")))?;
    let text = fsutil::read_string(&dir.join(format!("{id}.json")))?;
    let record = parse_findings(&text, registry)?;
    let [t, h, w] = mask.dims();
    if (volume.slices(), volume.height(), volume.width()) != (t, h, w) {
        return Err(Error::schema(format!(
            "study `{id}`: volume and mask dimensions differ"
        )));
    }
    Ok(Study {
        id: id.to_string(),
        volume,
        mask,
        record,
    })
}

pub fn read_dataset(dir: &Path, registry: &OrganRegistry) -> Result<(DatasetManifest, Vec<Study>)> {
    let manifest = read_manifest(dir)?;
    let studies = manifest
        .studies
        .iter()
        .map(|id| read_study(dir, id, registry))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, studies))
}
