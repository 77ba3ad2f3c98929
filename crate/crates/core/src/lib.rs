//! Variable-length volumetric vision-language pretraining at desk scale.
//!
//! Volumes are cut into z-axis chunks, encoded by a 3D-patch transformer
//! whose attention uses rotary position embeddings, and aligned with
//! chunk-specific text composed from organ-level findings.

pub mod error;
pub mod numkernel;

pub use error::{Error, Result};
pub use fsutil::atomic_write;
pub mod align;
pub mod encoder;
pub mod eval;
mod fsutil;
pub mod objective;
pub mod train;
pub mod verify;
