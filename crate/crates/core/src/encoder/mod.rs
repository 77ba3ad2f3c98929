//! Vision and text towers built from rotary-attention transformer blocks.
//!
//! Neither tower has an absolute position table: token order enters only
//! through the rotation applied to queries and keys, so chunks of any slice
//! count share one set of weights.

pub mod checkpoint;
mod config;
mod model;
mod patch;
pub mod rope;
mod tokenizer;

pub use config::EncoderConfig;
pub use model::{
    attention_block, init_params, multi_head_attention, param_shapes, text_forward, text_tokens, tower_blocks,
    tower_head, vision_forward, vision_tokens, AttentionOutput, DualEncoder, LOGIT_BIAS, LOG_TEMPERATURE, LOSS, TEXT,
    VISION,
};
pub use patch::{normalize_intensity, pad_slices, patchify, ChunkTensor, PaddingMode, TokenSequence};
pub use rope::{apply_rope, rope_frequencies};
pub use tokenizer::{Tokenizer, BOS};
