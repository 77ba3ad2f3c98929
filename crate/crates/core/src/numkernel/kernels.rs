//! Plain forward/backward kernels shared by the tape and by inference code.

use crate::error::{Error, Result};

use super::tensor::{gemm, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Tanh-approximated GELU, written as `x * sigmoid(2u)` since `1 + tanh(u) = 2 sigmoid(2u)`.
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x))
}

pub fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x));
    // 1 - tanh(u)^2 = 4 s (1 - s)
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Returns `(output, xhat, rstd)` for normalization over the last axis.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let n = gain.len();
    let mut out = x.clone();
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = Vec::with_capacity(x.numel() / n);
    for ((row, xr), hr) in out
        .data_mut()
        .chunks_mut(n)
        .zip(x.data().chunks(n))
        .zip(xhat.chunks_mut(n))
    {
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        for i in 0..n {
            hr[i] = (xr[i] - mean) * r;
            row[i] = hr[i] * gain[i] + bias[i];
        }
        rstd.push(r);
    }
    (out, xhat, rstd)
}

/// Softmax over the last axis with max subtraction. `-inf` entries map to
/// exactly zero; NaN, `+inf` or an all-`-inf` row is an error.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_row(row)?;
    }
    Ok(out)
}

fn softmax_row(row: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::NonFinite { op: "softmax" });
        }
        max = max.max(v);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::contract("softmax row has no unmasked entry"));
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Precomputed rotation angles for a `[L, d]` slab.
#[derive(Debug, Clone)]
pub struct RopeTable {
    len: usize,
    dim: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(positions: &[usize], dim: usize, base: f64) -> Result<Self> {
        let freqs = rope_frequencies(dim, base)?;
        let angles = positions
            .iter()
            .flat_map(|&t| freqs.iter().map(move |w| t as f64 * w))
            .collect();
        Self::from_angles(positions.len(), dim, angles)
    }

    /// Explicit angles, row-major `[L, d/2]`.
    pub fn from_angles(len: usize, dim: usize, angles: Vec<f64>) -> Result<Self> {
        if !dim.is_multiple_of(2) || angles.len() != len * dim / 2 {
            return Err(Error::config(format!(
                "rope needs an even head dimension and {} angles, got d={dim} and {}",
                len * dim / 2,
                angles.len()
            )));
        }
        Ok(RopeTable {
            len,
            dim,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        })
    }

    /// Rotates every `[L, d]` slab in place; `inverse` applies the transpose.
    pub fn rotate(&self, data: &mut [f64], inverse: bool) {
        let half = self.dim / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for slab in data.chunks_mut(self.len * self.dim) {
            for t in 0..self.len {
                let row = &mut slab[t * self.dim..(t + 1) * self.dim];
                for r in 0..half {
                    let c = self.cos[t * half + r];
                    let s = sign * self.sin[t * half + r];
                    let (x0, x1) = (row[2 * r], row[2 * r + 1]);
                    row[2 * r] = x0 * c - x1 * s;
                    row[2 * r + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Geometric frequencies `base^(-2r/d)` for `r = 0..d/2`.
pub fn rope_frequencies(dim: usize, base: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!("rope head dimension must be even, got {dim}")));
    }
    if base.is_nan() || base <= 1.0 || base.is_infinite() {
        return Err(Error::config(format!(
            "rope base must be a finite value > 1, got {base}"
        )));
    }
    Ok((0..dim / 2).map(|r| base.powf(-2.0 * r as f64 / dim as f64)).collect())
}

pub fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let s = x.shape();
    let r = s.len();
    let (l, c) = (s[r - 2], s[r - 1]);
    let d = c / heads;
    let batch = x.numel() / (l * c);
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * l * c..(b + 1) * l * c];
        let dst = &mut out[b * l * c..(b + 1) * l * c];
        for t in 0..l {
            for h in 0..heads {
                dst[(h * l + t) * d..(h * l + t + 1) * d].copy_from_slice(&src[t * c + h * d..t * c + (h + 1) * d]);
            }
        }
    }
    let mut shape = s[..r - 2].to_vec();
    shape.extend([heads, l, d]);
    Tensor::new(shape, out).expect("split_heads preserves element count")
}

pub fn merge_heads(x: &Tensor) -> Tensor {
    let s = x.shape();
    let r = s.len();
    let (heads, l, d) = (s[r - 3], s[r - 2], s[r - 1]);
    let c = heads * d;
    let batch = x.numel() / (l * c);
    let mut out = vec![0.0; x.numel()];
    for b in 0..batch {
        let src = &x.data()[b * l * c..(b + 1) * l * c];
        let dst = &mut out[b * l * c..(b + 1) * l * c];
        for h in 0..heads {
            for t in 0..l {
                dst[t * c + h * d..t * c + (h + 1) * d].copy_from_slice(&src[(h * l + t) * d..(h * l + t + 1) * d]);
            }
        }
    }
    let mut shape = s[..r - 3].to_vec();
    shape.extend([l, c]);
    Tensor::new(shape, out).expect("merge_heads preserves element count")
}

struct AttnLayout {
    len: usize,
    dim: usize,
    groups: usize,
    heads: usize,
}

fn attn_layout(q: &Tensor, key_pad: &[bool]) -> Result<AttnLayout> {
    let s = q.shape();
    let r = s.len();
    if r < 2 {
        return Err(Error::contract("attention needs [.., L, d] inputs"));
    }
    let (len, dim) = (s[r - 2], s[r - 1]);
    let groups = q.numel() / (len * dim);
    let heads = if r >= 3 { s[r - 3] } else { 1 };
    if !key_pad.is_empty() && key_pad.len() != (groups / heads) * len {
        return Err(Error::Shape {
            op: "attention",
            lhs: s.to_vec(),
            rhs: vec![key_pad.len()],
        });
    }
    Ok(AttnLayout {
        len,
        dim,
        groups,
        heads,
    })
}

/// Computes `softmax(q k^T / sqrt(d) + mask) v` per group. Returns the
/// attention probabilities too when `keep_probs` is set.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_pad: &[bool],
    keep_probs: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let AttnLayout {
        len,
        dim,
        groups,
        heads,
    } = attn_layout(q, key_pad)?;
    let scale = 1.0 / (dim as f64).sqrt();
    let slab = len * dim;
    let mut out = vec![0.0; q.numel()];
    let mut probs = keep_probs.then(|| Vec::with_capacity(groups * len * len));
    let mut scores = vec![0.0; len * len];
    for gi in 0..groups {
        let qg = &q.data()[gi * slab..(gi + 1) * slab];
        let kg = &k.data()[gi * slab..(gi + 1) * slab];
        let vg = &v.data()[gi * slab..(gi + 1) * slab];
        gemm(len, dim, len, scale, qg, dim, 1, kg, 1, dim, 0.0, &mut scores, len, 1);
        let pad = (!key_pad.is_empty()).then(|| &key_pad[(gi / heads) * len..(gi / heads + 1) * len]);
        for row in scores.chunks_mut(len) {
            if let Some(pad) = pad {
                for (sv, &p) in row.iter_mut().zip(pad) {
                    if p {
                        *sv = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_row(row)?;
        }
        gemm(
            len,
            len,
            dim,
            1.0,
            &scores,
            len,
            1,
            vg,
            dim,
            1,
            0.0,
            &mut out[gi * slab..],
            dim,
            1,
        );
        if let Some(p) = probs.as_mut() {
            p.extend_from_slice(&scores);
        }
    }
    Ok((Tensor::new(q.shape().to_vec(), out)?, probs))
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_pad: &[bool],
    probs: &[f64],
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let AttnLayout { len, dim, groups, .. } = attn_layout(q, key_pad)?;
    if probs.len() != groups * len * len {
        return Err(Error::contract("attention probabilities were not retained"));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let slab = len * dim;
    let mut dq = vec![0.0; q.numel()];
    let mut dk = vec![0.0; q.numel()];
    let mut dv = vec![0.0; q.numel()];
    let mut dp = vec![0.0; len * len];
    for gi in 0..groups {
        let p = &probs[gi * len * len..(gi + 1) * len * len];
        let go = &g.data()[gi * slab..(gi + 1) * slab];
        let qg = &q.data()[gi * slab..(gi + 1) * slab];
        let kg = &k.data()[gi * slab..(gi + 1) * slab];
        let vg = &v.data()[gi * slab..(gi + 1) * slab];
        // dV = P^T dO
        gemm(
            len,
            len,
            dim,
            1.0,
            p,
            1,
            len,
            go,
            dim,
            1,
            0.0,
            &mut dv[gi * slab..],
            dim,
            1,
        );
        // dP = dO V^T
        gemm(len, dim, len, 1.0, go, dim, 1, vg, 1, dim, 0.0, &mut dp, len, 1);
        for (pr, dr) in p.chunks(len).zip(dp.chunks_mut(len)) {
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot);
            }
        }
        // dQ = dS K / sqrt(d), dK = dS^T Q / sqrt(d)
        gemm(
            len,
            len,
            dim,
            scale,
            &dp,
            len,
            1,
            kg,
            dim,
            1,
            0.0,
            &mut dq[gi * slab..],
            dim,
            1,
        );
        gemm(
            len,
            len,
            dim,
            scale,
            &dp,
            1,
            len,
            qg,
            dim,
            1,
            0.0,
            &mut dk[gi * slab..],
            dim,
            1,
        );
    }
    let shape = q.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), dq)?,
        Tensor::new(shape.clone(), dk)?,
        Tensor::new(shape, dv)?,
    ))
}

fn pool_layout(x: &Tensor, pad: &[bool]) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    let r = s.len();
    if r < 2 {
        return Err(Error::contract("pooling needs [.., L, C] input"));
    }
    let (l, c) = (s[r - 2], s[r - 1]);
    let batch = x.numel() / (l * c);
    if !pad.is_empty() && pad.len() != batch * l {
        return Err(Error::Shape {
            op: "masked_mean_pool",
            lhs: s.to_vec(),
            rhs: vec![pad.len()],
        });
    }
    Ok((batch, l, c))
}

fn kept(pad: &[bool], b: usize, l: usize) -> Result<usize> {
    let n = if pad.is_empty() {
        l
    } else {
        pad[b * l..(b + 1) * l].iter().filter(|p| !**p).count()
    };
    if n == 0 {
        return Err(Error::contract("cannot pool a fully padded sequence"));
    }
    Ok(n)
}

pub fn masked_mean_pool(x: &Tensor, pad: &[bool]) -> Result<Tensor> {
    let (batch, l, c) = pool_layout(x, pad)?;
    let mut out = vec![0.0; batch * c];
    for b in 0..batch {
        let n = kept(pad, b, l)? as f64;
        let dst = &mut out[b * c..(b + 1) * c];
        for t in 0..l {
            if !pad.is_empty() && pad[b * l + t] {
                continue;
            }
            let src = &x.data()[(b * l + t) * c..(b * l + t + 1) * c];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d /= n);
    }
    let mut shape = x.shape()[..x.rank() - 2].to_vec();
    shape.push(c);
    Tensor::new(shape, out)
}

pub fn masked_mean_pool_backward(x: &Tensor, pad: &[bool], g: &Tensor) -> Result<Tensor> {
    let (batch, l, c) = pool_layout(x, pad)?;
    let mut dx = vec![0.0; x.numel()];
    for b in 0..batch {
        let n = kept(pad, b, l)? as f64;
        for t in 0..l {
            if !pad.is_empty() && pad[b * l + t] {
                continue;
            }
            let dst = &mut dx[(b * l + t) * c..(b * l + t + 1) * c];
            for (d, gv) in dst.iter_mut().zip(&g.data()[b * c..(b + 1) * c]) {
                *d = gv / n;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}
