//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly, appends a node holding its output value, and
//! remembers how to push an output gradient back to its inputs. `backward`
//! walks the nodes in reverse recording order and accumulates (`+=`) into
//! the gradient slot of every node that requires a gradient.

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::{gemm, MatmulPlan, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    MulConst {
        x: Var,
        c: Tensor,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    AddScalar {
        x: Var,
        s: Var,
    },
    Exp {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    LogSigmoid {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Rope {
        x: Var,
        table: kernels::RopeTable,
    },
    SplitHeads {
        x: Var,
    },
    MergeHeads {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Stack {
        xs: Vec<Var>,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::MulScalar { .. } => "mul_scalar",
            Op::AddScalar { .. } => "add_scalar",
            Op::Exp { .. } => "exp",
            Op::Gelu { .. } => "gelu",
            Op::LogSigmoid { .. } => "log_sigmoid",
            Op::SumAll { .. } => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Rope { .. } => "rope",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Attention { .. } => "attention",
            Op::MaskedMeanPool { .. } => "masked_mean_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Gather { .. } => "gather",
            Op::Stack { .. } => "stack",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
        }
    }
}

/// Names accepted by [`Tape::inject_backward_fault`].
pub const BACKWARD_OPS: [&str; 24] = [
    "matmul",
    "add",
    "add_bias",
    "mul",
    "scale",
    "mul_const",
    "mul_scalar",
    "add_scalar",
    "exp",
    "gelu",
    "log_sigmoid",
    "sum",
    "layer_norm",
    "softmax",
    "rope",
    "split_heads",
    "merge_heads",
    "attention",
    "masked_mean_pool",
    "l2_normalize",
    "gather",
    "stack",
    "transpose",
    "reshape",
];

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for a single step and replays it backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    check_finite: bool,
    backward_at: Option<usize>,
    fault: Option<(&'static str, f64)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Abort with the op name as soon as any op produces a NaN or infinity.
    pub fn with_nan_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Scales the input gradients produced by every `op` node by `factor`.
    /// Only used to prove the gradient checker catches a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes so the tape can serve the next step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_at = None;
    }

    /// Drops every node recorded after the first `len`, keeping earlier
    /// leaves so a forward pass can be replayed without re-binding them.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.backward_at = None;
    }

    /// Mutable access to a leaf's value; nodes computed from it are stale
    /// until the tape is truncated back past them.
    pub fn leaf_mut(&mut self, v: Var) -> Result<&mut Tensor> {
        match self.nodes.get_mut(v.0) {
            Some(Node {
                value, op: Op::Leaf, ..
            }) => Ok(value),
            _ => Err(Error::contract(format!("node {} is not a leaf", v.0))),
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    /// A leaf whose gradient is accumulated by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Row-major `[groups, L, L]` probabilities of an attention node, kept
    /// only when one of its inputs requires a gradient.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } if !probs.is_empty() => Some(probs),
            _ => None,
        }
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push(value, &[x], op)
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, &[a, b], Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, &[a, b], Op::Add { a, b })
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push(value, &[x, bias], Op::AddBias { x, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, |v| v * s, Op::Scale { x, s })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if c.shape() != self.shape(x) {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, &[x], Op::MulConst { x, c })
    }

    /// Multiplies every element by a one-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|v| v * sv).collect(),
        )?;
        self.push(value, &[x, s], Op::MulScalar { x, s })
    }

    /// Adds a one-element tensor to every element.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let value = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().map(|v| v + sv).collect(),
        )?;
        self.push(value, &[x, s], Op::AddScalar { x, s })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, f64::exp, Op::Exp { x })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, kernels::gelu, Op::Gelu { x })
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, kernels::log_sigmoid, Op::LogSigmoid { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), &[x], Op::SumAll { x })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let n = *self.shape(x).last().unwrap_or(&1);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (value, xhat, rstd) =
            kernels::layer_norm(self.value(x), self.value(gain).data(), self.value(bias).data(), eps);
        let op = if self.any_requires_grad(&[x, gain, bias]) {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            }
        } else {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Vec::new(),
                rstd: Vec::new(),
            }
        };
        self.push(value, &[x, gain, bias], op)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = kernels::softmax_lastdim(self.value(x))?;
        self.push(value, &[x], Op::Softmax { x })
    }

    /// Rotates (even, odd) coordinate pairs of `[.., L, d]` by `t * base^(-2r/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] != positions.len() {
            return Err(Error::Shape {
                op: "rope",
                lhs: shape,
                rhs: vec![positions.len()],
            });
        }
        let table = kernels::RopeTable::new(positions, shape[r - 1], base)?;
        let mut value = self.value(x).clone();
        table.rotate(value.data_mut(), false);
        self.push(value, &[x], Op::Rope { x, table })
    }

    /// `[.., L, H*d]` to `[.., H, L, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if shape.len() < 2 || heads == 0 || !c.is_multiple_of(heads) {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: shape,
                rhs: vec![heads],
            });
        }
        let value = kernels::split_heads(self.value(x), heads);
        self.push(value, &[x], Op::SplitHeads { x })
    }

    /// `[.., H, L, d]` to `[.., L, H*d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() < 3 {
            return Err(Error::contract("merge_heads needs rank >= 3"));
        }
        let value = kernels::merge_heads(self.value(x));
        self.push(value, &[x], Op::MergeHeads { x })
    }

    /// Masked scaled dot-product attention over `[.., H, L, d]` inputs.
    ///
    /// `key_pad` holds one flag per (batch row, key); `true` excludes the key.
    /// An empty slice means no padding.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_pad: &[bool]) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let keep = self.any_requires_grad(&[q, k, v]);
        let (value, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), key_pad, keep)?;
        let op = Op::Attention {
            q,
            k,
            v,
            mask: key_pad.to_vec(),
            probs: probs.unwrap_or_default(),
        };
        self.push(value, &[q, k, v], op)
    }

    /// Mean over the `L` axis of `[.., L, C]`, skipping padded tokens.
    pub fn masked_mean_pool(&mut self, x: Var, pad: &[bool]) -> Result<Var> {
        let value = kernels::masked_mean_pool(self.value(x), pad)?;
        self.push(value, &[x], Op::MaskedMeanPool { x, mask: pad.to_vec() })
    }

    /// Scales every row of `[.., D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let d = *src.shape().last().unwrap_or(&1);
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::contract("cannot normalize a zero or non-finite row"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(out, &[x], Op::L2Normalize { x, norms })
    }

    /// Selects rows of a `[V, C]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::contract("gather needs a [V, C] table and at least one id"));
        }
        let (vocab, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vocab {
                return Err(Error::contract(format!("id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        self.push(
            value,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("stack of nothing"))?;
        let shape = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(first).numel());
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: shape,
                    rhs: self.shape(x).to_vec(),
                });
            }
            data.extend_from_slice(self.value(x).data());
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend(shape);
        let value = Tensor::new(out_shape, data)?;
        self.push(value, xs, Op::Stack { xs: xs.to_vec() })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose_last2()?;
        self.push(value, &[x], Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push(value, &[x], Op::Reshape { x })
    }

    // ---- backward ----------------------------------------------------

    /// Backpropagates from a one-element output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Backpropagates an explicit output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if self.backward_at == Some(self.nodes.len()) {
            return Err(Error::contract("backward already ran for this forward pass"));
        }
        if seed.shape() != self.shape(out) {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(out).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        self.backward_at = Some(self.nodes.len());
        accumulate(&self.nodes, &mut self.grads, out, seed);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let mut contributions = backward_rule(&self.nodes, node, &g)?;
            if let Some((name, factor)) = self.fault {
                if name == node.op.name() {
                    for (_, t) in &mut contributions {
                        t.scale_in_place(factor);
                    }
                }
            }
            self.grads[idx] = Some(g);
            for (v, t) in contributions {
                accumulate(&self.nodes, &mut self.grads, v, t);
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data = x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let plan = MatmulPlan::new(av.shape(), bv.shape())?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut da = needs(*a).then(|| Tensor::zeros(av.shape().to_vec()));
            let mut db = needs(*b).then(|| Tensor::zeros(bv.shape().to_vec()));
            for (oi, (ai, bi)) in plan.pairs().enumerate() {
                let go = &g.data()[oi * m * n..];
                if let Some(da) = da.as_mut() {
                    // da += g * b^T
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        go,
                        n,
                        1,
                        &bv.data()[bi * k * n..],
                        1,
                        n,
                        1.0,
                        &mut da.data_mut()[ai * m * k..],
                        k,
                        1,
                    );
                }
                if let Some(db) = db.as_mut() {
                    // db += a^T * g
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &av.data()[ai * m * k..],
                        1,
                        k,
                        go,
                        n,
                        1,
                        1.0,
                        &mut db.data_mut()[bi * k * n..],
                        n,
                        1,
                    );
                }
            }
            out.extend(da.map(|t| (*a, t)));
            out.extend(db.map(|t| (*b, t)));
        }
        Op::Add { a, b } => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::AddBias { x, bias } => {
            out.push((*x, g.clone()));
            if needs(*bias) {
                let n = val(*bias).numel();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                out.push((*bias, Tensor::vector(db)));
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                out.push((*a, elementwise(val(*b), g, |bv, gv| bv * gv)?));
            }
            if needs(*b) {
                out.push((*b, elementwise(val(*a), g, |av, gv| av * gv)?));
            }
        }
        Op::Scale { x, s } => {
            let mut t = g.clone();
            t.scale_in_place(*s);
            out.push((*x, t));
        }
        Op::MulConst { x, c } => {
            out.push((*x, elementwise(c, g, |cv, gv| cv * gv)?));
        }
        Op::MulScalar { x, s } => {
            let sv = val(*s).data()[0];
            if needs(*x) {
                let mut t = g.clone();
                t.scale_in_place(sv);
                out.push((*x, t));
            }
            if needs(*s) {
                let ds: f64 = val(*x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                out.push((*s, Tensor::full(val(*s).shape().to_vec(), ds)));
            }
        }
        Op::AddScalar { x, s } => {
            out.push((*x, g.clone()));
            if needs(*s) {
                let ds: f64 = g.data().iter().sum();
                out.push((*s, Tensor::full(val(*s).shape().to_vec(), ds)));
            }
        }
        Op::Exp { x } => {
            out.push((*x, elementwise(&node.value, g, |y, gv| y * gv)?));
        }
        Op::Gelu { x } => {
            out.push((*x, elementwise(val(*x), g, |xv, gv| kernels::gelu_grad(xv) * gv)?));
        }
        Op::LogSigmoid { x } => {
            out.push((*x, elementwise(val(*x), g, |xv, gv| kernels::sigmoid(-xv) * gv)?));
        }
        Op::SumAll { x } => {
            out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0])));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = val(*gain).numel();
            let gain_v = val(*gain).data();
            let mut dx = vec![0.0; g.numel()];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for (row, ((gr, xh), dxr)) in g.data().chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for i in 0..n {
                    let d = gr[i] * gain_v[i];
                    mean_d += d;
                    mean_dx += d * xh[i];
                    dgain[i] += gr[i] * xh[i];
                    dbias[i] += gr[i];
                }
                mean_d /= n as f64;
                mean_dx /= n as f64;
                for i in 0..n {
                    let d = gr[i] * gain_v[i];
                    dxr[i] = rstd[row] * (d - mean_d - xh[i] * mean_dx);
                }
            }
            out.push((*x, Tensor::new(g.shape().to_vec(), dx)?));
            out.push((*gain, Tensor::vector(dgain)));
            out.push((*bias, Tensor::vector(dbias)));
        }
        Op::Softmax { x } => {
            let y = &node.value;
            let n = *y.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; y.numel()];
            for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    dr[i] = yr[i] * (gr[i] - dot);
                }
            }
            out.push((*x, Tensor::new(y.shape().to_vec(), dx)?));
        }
        Op::Rope { x, table } => {
            let mut t = g.clone();
            table.rotate(t.data_mut(), true);
            out.push((*x, t));
        }
        Op::SplitHeads { x, .. } => {
            out.push((*x, kernels::merge_heads(g)));
        }
        Op::MergeHeads { x } => {
            let heads = val(*x).shape()[val(*x).rank() - 3];
            out.push((*x, kernels::split_heads(g, heads)));
        }
        Op::Attention { q, k, v, mask, probs } => {
            let (dq, dk, dv) = kernels::attention_backward(val(*q), val(*k), val(*v), mask, probs, g)?;
            out.push((*q, dq));
            out.push((*k, dk));
            out.push((*v, dv));
        }
        Op::MaskedMeanPool { x, mask } => {
            out.push((*x, kernels::masked_mean_pool_backward(val(*x), mask, g)?));
        }
        Op::L2Normalize { x, norms } => {
            let y = &node.value;
            let d = *y.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; y.numel()];
            for (i, ((yr, gr), dr)) in y
                .data()
                .chunks(d)
                .zip(g.data().chunks(d))
                .zip(dx.chunks_mut(d))
                .enumerate()
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dr[j] = (gr[j] - yr[j] * dot) / norms[i];
                }
            }
            out.push((*x, Tensor::new(y.shape().to_vec(), dx)?));
        }
        Op::Gather { table, ids } => {
            let tv = val(*table);
            let c = tv.shape()[1];
            let mut dt = Tensor::zeros(tv.shape().to_vec());
            for (row, &id) in ids.iter().enumerate() {
                let dst = &mut dt.data_mut()[id * c..(id + 1) * c];
                for (d, gv) in dst.iter_mut().zip(&g.data()[row * c..(row + 1) * c]) {
                    *d += gv;
                }
            }
            out.push((*table, dt));
        }
        Op::Stack { xs } => {
            let shape = val(xs[0]).shape().to_vec();
            let width = val(xs[0]).numel();
            for (i, x) in xs.iter().enumerate() {
                if needs(*x) {
                    let slice = g.data()[i * width..(i + 1) * width].to_vec();
                    out.push((*x, Tensor::new(shape.clone(), slice)?));
                }
            }
        }
        Op::Transpose { x } => {
            out.push((*x, g.transpose_last2()?));
        }
        Op::Reshape { x } => {
            out.push((*x, g.reshape(val(*x).shape().to_vec())?));
        }
    }
    Ok(out)
}
