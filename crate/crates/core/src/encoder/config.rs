use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions shared by the vision and text towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub rope_base: f64,
    pub in_plane_size: usize,
    pub patch_xy: usize,
    pub patch_z: usize,
    pub text_vocab_size: usize,
    pub text_max_len: usize,
    pub embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl EncoderConfig {
    /// Desk-scale preset used by tests and the default CLI runs.
    pub fn tiny() -> Self {
        EncoderConfig {
            channels: 32,
            heads: 4,
            layers: 2,
            rope_base: 1000.0,
            in_plane_size: 32,
            patch_xy: 8,
            patch_z: 8,
            text_vocab_size: 2048,
            text_max_len: 128,
            embed_dim: 32,
            mlp_ratio: default_mlp_ratio(),
            ln_eps: default_ln_eps(),
        }
    }

    /// Full-size input geometry (256x256 in-plane, 16x16x16 patches, base 1000)
    /// with small channel counts so it still runs on a CPU.
    pub fn full_geometry() -> Self {
        EncoderConfig {
            in_plane_size: 256,
            patch_xy: 16,
            patch_z: 16,
            ..Self::tiny()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Number of voxels in one patch.
    pub fn patch_volume(&self) -> usize {
        self.patch_z * self.patch_xy * self.patch_xy
    }

    pub fn mlp_width(&self) -> usize {
        self.channels * self.mlp_ratio
    }

    /// Token count for a chunk of `slices` slices after padding.
    pub fn token_count(&self, slices: usize) -> usize {
        let padded = slices.div_ceil(self.patch_z) * self.patch_z;
        let per_axis = self.in_plane_size / self.patch_xy;
        (padded / self.patch_z) * per_axis * per_axis
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("heads", self.heads),
            ("layers", self.layers),
            ("in_plane_size", self.in_plane_size),
            ("patch_xy", self.patch_xy),
            ("patch_z", self.patch_z),
            ("text_max_len", self.text_max_len),
            ("embed_dim", self.embed_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "channels ({}) not divisible by heads ({})",
                self.channels, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(format!(
                "head dimension {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        if !self.in_plane_size.is_multiple_of(self.patch_xy) {
            return Err(Error::config(format!(
                "in-plane size {} not divisible by patch_xy {}",
                self.in_plane_size, self.patch_xy
            )));
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 || self.rope_base.is_infinite() {
            return Err(Error::config(format!("rope_base must be > 1, got {}", self.rope_base)));
        }
        if self.text_vocab_size < 2 {
            return Err(Error::config("text_vocab_size must leave room for the BOS id"));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::config("ln_eps must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        EncoderConfig::tiny().validate().unwrap();
        EncoderConfig::full_geometry().validate().unwrap();
    }

    #[test]
    fn full_geometry_token_counts() {
        let cfg = EncoderConfig::full_geometry();
        assert_eq!(cfg.token_count(16), 256);
        assert_eq!(cfg.token_count(32), 512);
        assert_eq!(cfg.token_count(128), 2048);
        assert_eq!(cfg.token_count(1), 256);
    }

    #[test]
    fn rejects_odd_head_dim_and_bad_patch() {
        let cfg = EncoderConfig {
            channels: 12,
            heads: 4,
            ..EncoderConfig::tiny()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            patch_xy: 7,
            ..EncoderConfig::tiny()
        };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig {
            rope_base: 1.0,
            ..EncoderConfig::tiny()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(EncoderConfig::tiny()).unwrap();
        v["chanels"] = serde_json::json!(3);
        assert!(serde_json::from_value::<EncoderConfig>(v).is_err());
    }
}
