use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values with shape metadata.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor({:?}, {:?})", self.shape, self.data)
        } else {
            write!(f, "Tensor({:?}, [{} values])", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `[rows, cols]` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("rows of unequal length"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Row `i` of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.numel() / self.shape.first().copied().unwrap_or(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::contract("transpose needs rank >= 2"));
        }
        let (m, n) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.numel() / (m * n);
        let mut out = vec![0.0; self.numel()];
        for bi in 0..batch {
            let src = &self.data[bi * m * n..(bi + 1) * m * n];
            let dst = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Tensor { shape, data: out })
    }

    /// Matrix product over the last two axes with broadcasting of leading batch axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(self.shape(), other.shape())?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        for (oi, (ai, bi)) in plan.pairs().enumerate() {
            gemm(
                plan.m,
                plan.k,
                plan.n,
                1.0,
                &self.data[ai * plan.m * plan.k..],
                plan.k,
                1,
                &other.data[bi * plan.k * plan.n..],
                plan.n,
                1,
                0.0,
                &mut out[oi * plan.m * plan.n..],
                plan.n,
                1,
            );
        }
        Tensor::new(plan.out_shape, out)
    }
}

/// Batch bookkeeping for a broadcast matmul `[..A, m, k] x [..B, k, n]`.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    out_batch: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = a[..a.len() - 2].to_vec();
        let b_batch = b[..b.len() - 2].to_vec();
        let rank = a_batch.len().max(b_batch.len());
        let mut out_batch = vec![0; rank];
        for (i, out) in out_batch.iter_mut().enumerate() {
            let da = dim_from_right(&a_batch, rank - 1 - i);
            let db = dim_from_right(&b_batch, rank - 1 - i);
            *out = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(mismatch()),
            };
        }
        let mut out_shape = out_batch.clone();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            out_shape,
            a_batch,
            b_batch,
            out_batch,
        })
    }

    /// For every output batch index, the flat batch index of `a` and `b`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let total: usize = self.out_batch.iter().product();
        (0..total).map(move |flat| {
            let mut rem = flat;
            let mut ai = 0;
            let mut bi = 0;
            let mut a_stride = 1;
            let mut b_stride = 1;
            let rank = self.out_batch.len();
            for axis in (0..rank).rev() {
                let idx = rem % self.out_batch[axis];
                rem /= self.out_batch[axis];
                let from_right = rank - 1 - axis;
                let da = dim_from_right(&self.a_batch, from_right);
                let db = dim_from_right(&self.b_batch, from_right);
                if da > 1 {
                    ai += idx * a_stride;
                }
                if db > 1 {
                    bi += idx * b_stride;
                }
                a_stride *= da;
                b_stride *= db;
            }
            (ai, bi)
        })
    }
}

fn dim_from_right(batch: &[usize], from_right: usize) -> usize {
    if from_right < batch.len() {
        batch[batch.len() - 1 - from_right]
    } else {
        1
    }
}

/// `c = alpha * a * b + beta * c` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(c.len() >= span(m, n, rsc, csc));
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == 0.0 { 0.0 } else { *v * beta };
            }
        }
        return;
    }
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
