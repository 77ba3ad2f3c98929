//! Pairwise sigmoid contrastive loss.
//!
//! Every (image i, text j) cell of the batch similarity matrix is an
//! independent binary decision, positive iff `i == j`:
//! `loss = -(1/B) * sum_ij log sigmoid(z_ij * (exp(t') * <img_i, txt_j> + b'))`.

use crate::encoder::{text_forward, vision_forward, ChunkTensor, EncoderConfig, LOGIT_BIAS, LOG_TEMPERATURE};
use crate::error::{Error, Result};
use crate::numkernel::kernels::log_sigmoid;
use crate::numkernel::{Bound, Tape, Tensor, Var};

/// `+1` on the diagonal, `-1` elsewhere.
pub fn pair_labels(batch: usize) -> Tensor {
    let mut z = Tensor::full(vec![batch, batch], -1.0);
    for i in 0..batch {
        z.data_mut()[i * batch + i] = 1.0;
    }
    z
}

fn batch_dims(img: &[usize], txt: &[usize]) -> Result<usize> {
    if img.len() != 2 || img != txt {
        return Err(Error::Shape {
            op: "sigmoid_pair_loss",
            lhs: img.to_vec(),
            rhs: txt.to_vec(),
        });
    }
    Ok(img[0])
}

/// Loss on the tape; `img` and `txt` are `[B, E]`, the two scalars one element each.
pub fn sigmoid_pair_loss(tape: &mut Tape, img: Var, txt: Var, log_temperature: Var, bias: Var) -> Result<Var> {
    let b = batch_dims(tape.shape(img), tape.shape(txt))?;
    let txt_t = tape.transpose(txt)?;
    let sim = tape.matmul(img, txt_t)?;
    let scale = tape.exp(log_temperature)?;
    let logits = tape.mul_scalar(sim, scale)?;
    let logits = tape.add_scalar(logits, bias)?;
    let signed = tape.mul_const(logits, pair_labels(b))?;
    let terms = tape.log_sigmoid(signed)?;
    let total = tape.sum(terms)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Plain evaluation, no tape.
pub fn sigmoid_pair_loss_value(img: &Tensor, txt: &Tensor, log_temperature: f64, bias: f64) -> Result<f64> {
    let b = batch_dims(img.shape(), txt.shape())?;
    let sim = img.matmul(&txt.transpose_last2()?)?;
    let scale = log_temperature.exp();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let z = if i == j { 1.0 } else { -1.0 };
            total += log_sigmoid(z * (scale * sim.data()[i * b + j] + bias));
        }
    }
    Ok(-total / b as f64)
}

/// Encodes a batch of chunks and token-id sequences on one tape and returns the loss.
///
/// Chunks must already be padded to a multiple of `patch_z`.
pub fn batch_loss(
    tape: &mut Tape,
    p: &Bound,
    chunks: &[ChunkTensor],
    texts: &[Vec<usize>],
    cfg: &EncoderConfig,
) -> Result<Var> {
    if chunks.is_empty() || chunks.len() != texts.len() {
        return Err(Error::contract(format!(
            "batch needs matching non-empty sides, got {} chunks and {} texts",
            chunks.len(),
            texts.len()
        )));
    }
    let img = chunks
        .iter()
        .map(|c| vision_forward(tape, p, c, cfg, cfg.rope_base))
        .collect::<Result<Vec<_>>>()?;
    let txt = texts
        .iter()
        .map(|ids| text_forward(tape, p, ids, cfg))
        .collect::<Result<Vec<_>>>()?;
    let img = tape.stack(&img)?;
    let txt = tape.stack(&txt)?;
    sigmoid_pair_loss(tape, img, txt, p.get(LOG_TEMPERATURE)?, p.get(LOGIT_BIAS)?)
}
