//! Evaluation sets and encoder-driven evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{organs_in_chunk, pair_for_window, ChunkSpec, OrganRegistry, Study};
use crate::encoder::{ChunkTensor, DualEncoder, PaddingMode};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

use super::metrics::{bootstrap_eval, RetrievalReport};

/// One evaluation item: a fixed-length window with its description.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub study_id: String,
    pub spec: ChunkSpec,
    pub chunk: ChunkTensor,
    pub text: String,
    /// Organs intersecting the window.
    pub organs: Vec<String>,
}

/// One window of `len` slices per study, padded to the z patch.
///
/// The start is drawn from stream `i` of the seeded generator for study `i`.
/// Studies shorter than `len` contribute their full depth.
pub fn fixed_length_pairs(
    studies: &[Study],
    registry: &OrganRegistry,
    len: usize,
    seed: u64,
    patch_z: usize,
    padding: PaddingMode,
) -> Result<Vec<EvalPair>> {
    if len == 0 {
        return Err(Error::contract("evaluation slice count must be positive"));
    }
    studies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let t = s.mask.slices();
            let spec = if t >= len {
                ChunkSpec {
                    start: rng.random_range(0..=t - len),
                    len,
                }
            } else {
                ChunkSpec { start: 0, len: t }
            };
            let pair = pair_for_window(&s.volume, &s.mask, &s.record, registry, spec, patch_z, padding)?;
            Ok(EvalPair {
                study_id: s.id.clone(),
                spec,
                chunk: pair.chunk,
                text: pair.text,
                organs: organs_in_chunk(&s.mask, &spec)?,
            })
        })
        .collect()
}

/// `[N, E]` vision embeddings at RoPE base `base`.
pub fn encode_images(model: &DualEncoder, chunks: &[&ChunkTensor], base: f64) -> Result<Tensor> {
    let rows = chunks
        .iter()
        .map(|c| model.encode_volume_with_base(c, base))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// `[N, E]` text embeddings.
pub fn encode_texts(model: &DualEncoder, texts: &[&str]) -> Result<Tensor> {
    let rows = texts.iter().map(|t| model.encode_text(t)).collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    pub subset_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

/// One row of the RoPE-base ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub multiplier: f64,
    pub base: f64,
    /// Whether this base equals the one used in training.
    pub training_base: bool,
    pub report: RetrievalReport,
}

pub const DEFAULT_BASE_MULTIPLIERS: [f64; 3] = [0.5, 1.0, 2.0];

/// Re-encodes the vision side with `multiplier * trained_base` (inference only)
/// and evaluates retrieval for each multiplier.
pub fn rope_base_sweep(
    model: &DualEncoder,
    pairs: &[EvalPair],
    multipliers: &[f64],
    boot: &BootstrapSpec,
) -> Result<Vec<SweepRow>> {
    let trained = model.config().rope_base;
    let chunks: Vec<&ChunkTensor> = pairs.iter().map(|p| &p.chunk).collect();
    let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
    let txt = encode_texts(model, &texts)?;
    multipliers
        .iter()
        .map(|&m| {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::config(format!("RoPE base multiplier {m} must be positive")));
            }
            let base = m * trained;
            let img = encode_images(model, &chunks, base)?;
            Ok(SweepRow {
                multiplier: m,
                base,
                training_base: base == trained,
                report: bootstrap_eval(&img, &txt, boot.subset_size, boot.iterations, boot.seed)?,
            })
        })
        .collect()
}

/// Standard retrieval evaluation at the trained base.
pub fn evaluate_retrieval(model: &DualEncoder, pairs: &[EvalPair], boot: &BootstrapSpec) -> Result<RetrievalReport> {
    let chunks: Vec<&ChunkTensor> = pairs.iter().map(|p| &p.chunk).collect();
    let texts: Vec<&str> = pairs.iter().map(|p| p.text.as_str()).collect();
    let img = encode_images(model, &chunks, model.config().rope_base)?;
    let txt = encode_texts(model, &texts)?;
    bootstrap_eval(&img, &txt, boot.subset_size, boot.iterations, boot.seed)
}

/// Presence labels of `classes` for each pair.
pub fn presence_labels(pairs: &[EvalPair], classes: &[String]) -> Vec<Vec<bool>> {
    pairs
        .iter()
        .map(|p| classes.iter().map(|c| p.organs.contains(c)).collect())
        .collect()
}
