//! Data side: findings records, organ masks, chunk sampling and
//! chunk-aligned description composition.

mod compose;
pub mod dataset;
mod findings;
mod mask;
mod pair;
mod registry;
mod sampling;
pub mod synth;
pub mod volume;

pub use compose::{compose_description, EMPTY_CHUNK_SENTENCE};
pub use dataset::Study;
pub use findings::{parse_findings, FindingsRecord, OrganFinding, Status, NOT_EXAMINED};
pub use mask::{organs_in_chunk, MaskVolume, MASK_FORMAT};
pub use pair::{build_training_pair, pair_for_window, pairs_to_jsonl, PairRecord, TrainingPair};
pub use registry::{OrganRegistry, DEFAULT_ORGANS, GENERAL_KEY};
pub use sampling::{sample_chunk, ChunkSpec, CHUNK_LENGTHS};
pub use synth::{synth_study, SynthConfig};
