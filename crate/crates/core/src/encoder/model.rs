use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numkernel::{Bound, ParamStore, Tape, Tensor, Var};

use super::config::EncoderConfig;
use super::patch::{pad_slices, patchify, ChunkTensor, PaddingMode, TokenSequence};
use super::rope::positions;
use super::tokenizer::Tokenizer;

pub const VISION: &str = "vision.";
pub const TEXT: &str = "text.";
pub const LOSS: &str = "loss.";
pub const LOG_TEMPERATURE: &str = "loss.log_temperature";
pub const LOGIT_BIAS: &str = "loss.bias";

/// Every parameter of both towers and the loss, with its shape.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.channels;
    let mut out = vec![
        ("vision.patch.weight".to_string(), vec![cfg.patch_volume(), c]),
        ("vision.patch.bias".to_string(), vec![c]),
        ("text.embed".to_string(), vec![cfg.text_vocab_size, c]),
        (LOG_TEMPERATURE.to_string(), vec![]),
        (LOGIT_BIAS.to_string(), vec![]),
    ];
    for tower in ["vision", "text"] {
        for i in 0..cfg.layers {
            let p = format!("{tower}.blocks.{i}");
            out.extend([
                (format!("{p}.ln1.gain"), vec![c]),
                (format!("{p}.ln1.bias"), vec![c]),
                (format!("{p}.attn.wq"), vec![c, c]),
                (format!("{p}.attn.wk"), vec![c, c]),
                (format!("{p}.attn.wv"), vec![c, c]),
                (format!("{p}.attn.wo"), vec![c, c]),
                (format!("{p}.ln2.gain"), vec![c]),
                (format!("{p}.ln2.bias"), vec![c]),
                (format!("{p}.mlp.w1"), vec![c, cfg.mlp_width()]),
                (format!("{p}.mlp.b1"), vec![cfg.mlp_width()]),
                (format!("{p}.mlp.w2"), vec![cfg.mlp_width(), c]),
                (format!("{p}.mlp.b2"), vec![c]),
            ]);
        }
        out.extend([
            (format!("{tower}.final_ln.gain"), vec![c]),
            (format!("{tower}.final_ln.bias"), vec![c]),
            (format!("{tower}.proj"), vec![c, cfg.embed_dim]),
        ]);
    }
    out
}

/// Seeded initialization: unit gains, zero biases, `N(0, 1/fan_in)` matrices,
/// log-temperature 0 and logit bias -2.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(cfg) {
        let n: usize = shape.iter().product();
        let data = if name == LOGIT_BIAS {
            vec![-2.0]
        } else if name.ends_with(".gain") {
            vec![1.0; n]
        } else if shape.len() < 2 {
            vec![0.0; n]
        } else {
            let std = if name == "text.embed" {
                1.0
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Output of the multi-head attention sub-layer.
pub struct AttentionOutput {
    /// `[.., L, C]` after the output projection.
    pub projected: Var,
    /// The attention node; its probabilities are readable via
    /// [`Tape::attention_probs`] when gradients are tracked.
    pub weights: Var,
}

/// `Concat_h(softmax(rope(Q) rope(K)^T / sqrt(d) + M) V) W_O` on `x: [.., L, C]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    x: Var,
    positions: &[usize],
    pad: &[bool],
    cfg: &EncoderConfig,
    base: f64,
) -> Result<AttentionOutput> {
    let q = tape.matmul(x, p.get(&format!("{prefix}.attn.wq"))?)?;
    let k = tape.matmul(x, p.get(&format!("{prefix}.attn.wk"))?)?;
    let v = tape.matmul(x, p.get(&format!("{prefix}.attn.wv"))?)?;
    let q = tape.split_heads(q, cfg.heads)?;
    let k = tape.split_heads(k, cfg.heads)?;
    let v = tape.split_heads(v, cfg.heads)?;
    let q = tape.rope(q, positions, base)?;
    let k = tape.rope(k, positions, base)?;
    let weights = tape.attention(q, k, v, pad)?;
    let merged = tape.merge_heads(weights)?;
    let projected = tape.matmul(merged, p.get(&format!("{prefix}.attn.wo"))?)?;
    Ok(AttentionOutput { projected, weights })
}

/// Pre-norm transformer block on `h: [B, L, C]` (or `[L, C]`):
/// `h + attn(ln1(h))`, then `+ mlp(ln2(.))`.
#[allow(clippy::too_many_arguments)]
pub fn attention_block(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    h: Var,
    positions: &[usize],
    pad: &[bool],
    cfg: &EncoderConfig,
    base: f64,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() < 2 || shape[shape.len() - 2] == 0 {
        return Err(Error::contract("attention block needs a non-empty [.., L, C] input"));
    }
    if shape[shape.len() - 1] != cfg.channels {
        return Err(Error::Shape {
            op: "attention_block",
            lhs: shape,
            rhs: vec![cfg.channels],
        });
    }
    let x = layer_norm(tape, p, &format!("{prefix}.ln1"), h, cfg)?;
    let attn = multi_head_attention(tape, p, prefix, x, positions, pad, cfg, base)?;
    let h = tape.add(h, attn.projected)?;
    let y = layer_norm(tape, p, &format!("{prefix}.ln2"), h, cfg)?;
    let y = tape.matmul(y, p.get(&format!("{prefix}.mlp.w1"))?)?;
    let y = tape.add_bias(y, p.get(&format!("{prefix}.mlp.b1"))?)?;
    let y = tape.gelu(y)?;
    let y = tape.matmul(y, p.get(&format!("{prefix}.mlp.w2"))?)?;
    let y = tape.add_bias(y, p.get(&format!("{prefix}.mlp.b2"))?)?;
    tape.add(h, y)
}

fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, cfg: &EncoderConfig) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.gain"))?;
    let bias = p.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, gain, bias, cfg.ln_eps)
}

/// Blocks `layers` of `tower` on `h: [L, C]`.
pub fn tower_blocks(
    tape: &mut Tape,
    p: &Bound,
    tower: &str,
    h: Var,
    layers: Range<usize>,
    cfg: &EncoderConfig,
    base: f64,
) -> Result<Var> {
    let pos = positions(tape.shape(h)[0]);
    layers.into_iter().try_fold(h, |h, i| {
        attention_block(tape, p, &format!("{tower}.blocks.{i}"), h, &pos, &[], cfg, base)
    })
}

/// Final norm, mean over tokens, projection and unit normalization.
pub fn tower_head(tape: &mut Tape, p: &Bound, tower: &str, h: Var, cfg: &EncoderConfig) -> Result<Var> {
    let h = layer_norm(tape, p, &format!("{tower}.final_ln"), h, cfg)?;
    let pooled = tape.masked_mean_pool(h, &[])?;
    let pooled = tape.reshape(pooled, &[1, cfg.channels])?;
    let z = tape.matmul(pooled, p.get(&format!("{tower}.proj"))?)?;
    let z = tape.reshape(z, &[cfg.embed_dim])?;
    tape.l2_normalize(z)
}

/// Patch tokens `[L, C]` of a chunk whose slice count is a multiple of `patch_z`.
pub fn vision_tokens(tape: &mut Tape, p: &Bound, chunk: &ChunkTensor, cfg: &EncoderConfig) -> Result<Var> {
    let patches = tape.constant(patchify(chunk, cfg)?);
    let tokens = tape.matmul(patches, p.get("vision.patch.weight")?)?;
    tape.add_bias(tokens, p.get("vision.patch.bias")?)
}

/// Token embeddings `[L, C]` of ids (`BOS` first).
pub fn text_tokens(tape: &mut Tape, p: &Bound, ids: &[usize], cfg: &EncoderConfig) -> Result<Var> {
    if ids.is_empty() || ids.len() > cfg.text_max_len {
        return Err(Error::contract(format!(
            "text length {} outside 1..={}",
            ids.len(),
            cfg.text_max_len
        )));
    }
    tape.gather(p.get("text.embed")?, ids)
}

/// Vision tower on one chunk whose slice count is a multiple of `patch_z`.
pub fn vision_forward(tape: &mut Tape, p: &Bound, chunk: &ChunkTensor, cfg: &EncoderConfig, base: f64) -> Result<Var> {
    let h = vision_tokens(tape, p, chunk, cfg)?;
    let h = tower_blocks(tape, p, "vision", h, 0..cfg.layers, cfg, base)?;
    tower_head(tape, p, "vision", h, cfg)
}

/// Text tower on token ids (`BOS` first).
pub fn text_forward(tape: &mut Tape, p: &Bound, ids: &[usize], cfg: &EncoderConfig) -> Result<Var> {
    let h = text_tokens(tape, p, ids, cfg)?;
    let h = tower_blocks(tape, p, "text", h, 0..cfg.layers, cfg, cfg.rope_base)?;
    tower_head(tape, p, "text", h, cfg)
}

/// Both towers with their weights; read-only once built.
#[derive(Debug)]
pub struct DualEncoder {
    cfg: EncoderConfig,
    params: ParamStore,
    tokenizer: Tokenizer,
}

impl Clone for DualEncoder {
    fn clone(&self) -> Self {
        DualEncoder {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            tokenizer: Tokenizer::new(self.cfg.text_vocab_size, self.cfg.text_max_len),
        }
    }
}

impl DualEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Self::from_parts(cfg, params)
    }

    /// Checks that `params` holds exactly the shapes `cfg` implies.
    pub fn from_parts(cfg: EncoderConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = param_shapes(&cfg);
        if expected.len() != params.len() {
            return Err(Error::schema(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .map_err(|_| Error::schema(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::schema(format!(
                    "parameter `{name}` has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        let tokenizer = Tokenizer::new(cfg.text_vocab_size, cfg.text_max_len);
        Ok(DualEncoder { cfg, params, tokenizer })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Pads a chunk (repeat mode) to a multiple of `patch_z` when needed.
    pub fn prepare_chunk(&self, chunk: &ChunkTensor) -> Result<ChunkTensor> {
        pad_slices(chunk, PaddingMode::Repeat, self.cfg.patch_z)
    }

    /// Projected patch tokens with their flattened positions.
    pub fn patch_embed(&self, chunk: &ChunkTensor) -> Result<TokenSequence> {
        let patches = patchify(chunk, &self.cfg)?;
        let mut tokens = patches.matmul(self.params.get("vision.patch.weight")?)?;
        let bias = self.params.get("vision.patch.bias")?.data();
        for row in tokens.data_mut().chunks_mut(self.cfg.channels) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let len = tokens.shape()[0];
        Ok(TokenSequence {
            tokens,
            positions: positions(len),
            pad_mask: vec![false; len],
        })
    }

    pub fn encode_volume(&self, chunk: &ChunkTensor) -> Result<Vec<f64>> {
        self.encode_volume_with_base(chunk, self.cfg.rope_base)
    }

    /// Vision embedding with an inference-time RoPE base override.
    pub fn encode_volume_with_base(&self, chunk: &ChunkTensor, base: f64) -> Result<Vec<f64>> {
        let chunk = self.prepare_chunk(chunk)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, VISION, false);
        let z = vision_forward(&mut tape, &p, &chunk, &self.cfg, base)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.tokenizer.encode(text);
        self.encode_text_ids(&ids)
    }

    pub fn encode_text_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, TEXT, false);
        let z = text_forward(&mut tape, &p, ids, &self.cfg)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn log_temperature(&self) -> f64 {
        self.params.get(LOG_TEMPERATURE).map_or(0.0, |t| t.data()[0])
    }

    pub fn logit_bias(&self) -> f64 {
        self.params.get(LOGIT_BIAS).map_or(0.0, |t| t.data()[0])
    }
}
