use std::sync::Arc;

use super::flops::{self, Kernel};
use super::kernels::{self, depthwise_conv, depthwise_conv_backward, matmul_nn, matmul_nt, matmul_tn};
use super::{Scalar, Tensor};
use crate::error::{shape_err, PantherError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which entries of each row take part in a softmax.
#[derive(Clone, Debug, Default)]
pub enum RowMask {
    #[default]
    None,
    /// Row `i` of an `n×m` input may read columns `j <= i + (m - n)`.
    Causal,
    /// Row-major `n×m` allow-list.
    Explicit(Arc<[bool]>),
    /// The same allow-list for every row.
    Columns(Arc<[bool]>),
}

impl RowMask {
    #[inline]
    fn allows(&self, i: usize, j: usize, n: usize, m: usize) -> bool {
        match self {
            RowMask::None => true,
            RowMask::Causal => j + n <= i + m,
            RowMask::Explicit(mask) => mask[i * m + j],
            RowMask::Columns(mask) => mask[j],
        }
    }

    fn check(&self, n: usize, m: usize) -> Result<()> {
        match self {
            RowMask::Causal if m < n => Err(shape_err("softmax", "causal mask needs cols >= rows")),
            RowMask::Explicit(mask) if mask.len() != n * m => {
                Err(shape_err("softmax", format!("mask length {} for {n}x{m}", mask.len())))
            }
            RowMask::Columns(mask) if mask.len() != m => {
                Err(shape_err("softmax", format!("column mask length {} for {m} cols", mask.len())))
            }
            _ => Ok(()),
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var, RowMask),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Conv { x: Var, kernel: Var, dilation: usize, causal: bool },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    PairwiseDist(Var),
    Sum(Var),
    Select { x: Var, idx: Vec<usize> },
    NllSum { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    MaxRows { x: Var, argmax: Vec<usize> },
    UnfoldCausal { x: Var, width: usize },
    BceWithLogits { x: Var, targets: Vec<T>, pos_weight: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// Parameters enter as leaves via [`Tape::param`]; after
/// [`Tape::backward`] their gradients are available through
/// [`Tape::grad`].
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let s = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let u = s * (x + c * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * s * (T::one() + T::of(3.0) * c * x * x);
    (y, dy)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, node, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.value(row).len() != m {
            return Err(shape_err(op, format!("row of {} for {m} cols", self.value(row).len())));
        }
        let va = self.value(a);
        let vr = self.value(row).data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(va.row(i).iter().zip(vr).map(|(&x, &r)| f(x, r)));
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.needs(a) || self.needs(row);
        Ok(self.push(out, node, g))
    }

    /// Adds a length-`cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// Scales every row of `a` elementwise by a length-`cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, r| x * r, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let g = self.needs(a);
        self.push(out, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let g = self.needs(a);
        self.push(out, Op::AddScalar(a), g)
    }

    /// `a[n×k] · b[k×m]`, counted as a generic product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_as(Kernel::Matmul, a, b)
    }

    pub fn matmul_as(&mut self, kind: Kernel, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{n}x{k}] · [{k2}x{m}]")));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        flops::add(kind, 2 * (n * k * m) as u64);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), g))
    }

    /// `a[n×k] · b[m×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_nt_as(Kernel::Matmul, a, b)
    }

    pub fn matmul_nt_as(&mut self, kind: Kernel, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{n}x{k}] · [{m}x{k2}]ᵀ")));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        flops::add(kind, 2 * (n * k * m) as u64);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulNT(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let va = self.value(a).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = va[i * m + j];
            }
        }
        let g = self.needs(a);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Transpose(a), g))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, node: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let g = self.needs(a);
        self.push(out, node, g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(shape_err("log", "input must be positive"));
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    /// Row-wise softmax with max subtraction. Masked entries are 0; a
    /// fully masked row is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: RowMask) -> Result<Var> {
        let (n, m) = self.dims(a);
        mask.check(n, m)?;
        let va = self.value(a);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = va.row(i);
            let mut mx = T::neg_infinity();
            for j in 0..m {
                if mask.allows(i, j, n, m) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for j in 0..m {
                if mask.allows(i, j, n, m) {
                    let e = (row[j] - mx).exp();
                    out[i * m + j] = e;
                    sum = sum + e;
                }
            }
            for o in &mut out[i * m..(i + 1) * m] {
                *o = *o / sum;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        let g = self.needs(a);
        Ok(self.push(out, Op::Softmax(a), g))
    }

    /// Row-wise log-softmax. Masked entries read as 0 and get no gradient.
    pub fn log_softmax_rows(&mut self, a: Var, mask: RowMask) -> Result<Var> {
        let (n, m) = self.dims(a);
        mask.check(n, m)?;
        let va = self.value(a);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = va.row(i);
            let mut mx = T::neg_infinity();
            for j in 0..m {
                if mask.allows(i, j, n, m) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for j in 0..m {
                if mask.allows(i, j, n, m) {
                    sum = sum + (row[j] - mx).exp();
                }
            }
            let lse = mx + sum.ln();
            for j in 0..m {
                if mask.allows(i, j, n, m) {
                    out[i * m + j] = row[j] - lse;
                }
            }
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        let g = self.needs(a);
        Ok(self.push(out, Op::LogSoftmax(a, mask), g))
    }

    /// Per-row standardization (no affine part), eps = 1e-5.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let eps = T::of(1e-5);
        let mf = T::of(m as f64);
        let va = self.value(a);
        let mut out = vec![T::zero(); n * m];
        let mut rstds = Vec::with_capacity(n);
        for i in 0..n {
            let row = va.row(i);
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / mf;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..m {
                out[i * m + j] = (row[j] - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let out = Tensor::new(va.shape().to_vec(), out)?;
        let g = self.needs(a);
        Ok(self.push(out, Op::LayerNorm { x: a, rstd: rstds }, g))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(PantherError::TokenRange { id, size: v });
            }
            out.extend_from_slice(vt.row(id));
        }
        let g = self.needs(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Depthwise dilated convolution of `x[T×d]` with `kernel[w×d]`.
    /// Causal mode left-pads by `(w-1)·dilation` so row `t` reads rows `<= t`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, dilation: usize, causal: bool) -> Result<Var> {
        let (t_len, d) = self.dims(x);
        let (w, d2) = self.dims(kernel);
        if d != d2 || w == 0 || dilation == 0 {
            return Err(shape_err(
                "depthwise_conv1d",
                format!("input [{t_len}x{d}], kernel [{w}x{d2}], dilation {dilation}"),
            ));
        }
        let out = depthwise_conv(self.value(x).data(), self.value(kernel).data(), t_len, d, w, dilation, causal);
        flops::add(Kernel::Conv, 2 * (t_len * w * d) as u64);
        let g = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            Tensor::matrix(t_len, d, out)?,
            Op::Conv {
                x,
                kernel,
                dilation,
                causal,
            },
            g,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.dims(p).0 != n) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        if parts.iter().any(|&p| self.dims(p).1 != m) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            n += self.dims(p).0;
        }
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims(x);
        if start + len > m {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {m}")));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&vx.row(i)[start..start + len]);
        }
        let g = self.needs(x);
        Ok(self.push(Tensor::matrix(n, len, out)?, Op::SliceCols { x, start }, g))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.dims(x);
        if start + len > n {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {n}")));
        }
        let out = self.value(x).data()[start * m..(start + len) * m].to_vec();
        let g = self.needs(x);
        Ok(self.push(Tensor::matrix(len, m, out)?, Op::SliceRows { x, start }, g))
    }

    /// Euclidean distances between all row pairs of `x[n×d]`.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.dims(x);
        let vx = self.value(x);
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = vx
                    .row(i)
                    .iter()
                    .zip(vx.row(j))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>()
                    .sqrt();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let g = self.needs(x);
        Ok(self.push(Tensor::matrix(n, n, out)?, Op::PairwiseDist(x), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let g = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Flat elements of `x` at `idx`, as a vector.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.len()) {
            return Err(shape_err("select", format!("index {bad} >= {}", vx.len())));
        }
        let out: Vec<T> = idx.iter().map(|&i| vx[i]).collect();
        let g = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![idx.len()], out)?,
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
            g,
        ))
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of
    /// `logits[n×V]`. Rows with a `None` target are skipped; `mask` limits
    /// the softmax support.
    pub fn nll_sum(&mut self, logits: Var, targets: &[Option<usize>], mask: &RowMask) -> Result<Var> {
        let (n, v) = self.dims(logits);
        if targets.len() != n {
            return Err(shape_err("nll_sum", format!("{} targets for {n} rows", targets.len())));
        }
        mask.check(n, v)?;
        let vl = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (i, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= v || !mask.allows(i, y, n, v) {
                return Err(PantherError::TokenRange { id: y, size: v });
            }
            let row = vl.row(i);
            let mut mx = T::neg_infinity();
            for j in 0..v {
                if mask.allows(i, j, n, v) && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut sum = T::zero();
            for j in 0..v {
                if mask.allows(i, j, n, v) {
                    let e = (row[j] - mx).exp();
                    probs[i * v + j] = e;
                    sum = sum + e;
                }
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p = *p / sum;
            }
            total = total - (row[y] - mx - sum.ln());
        }
        let g = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::NllSum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Column-wise maximum over rows: `[n×m] -> [1×m]`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if n == 0 {
            return Err(shape_err("max_rows", "no rows"));
        }
        let vx = self.value(x);
        let mut out = vx.row(0).to_vec();
        let mut argmax = vec![0usize; m];
        for i in 1..n {
            for (j, &val) in vx.row(i).iter().enumerate() {
                if val > out[j] {
                    out[j] = val;
                    argmax[j] = i;
                }
            }
        }
        let g = self.needs(x);
        Ok(self.push(Tensor::matrix(1, m, out)?, Op::MaxRows { x, argmax }, g))
    }

    /// Causal sliding windows: row `t` of the `[T × width·d]` output holds
    /// rows `t-width+1 ..= t` of `x`, zero-padded on the left.
    pub fn unfold_causal(&mut self, x: Var, width: usize) -> Result<Var> {
        let (t_len, d) = self.dims(x);
        if width == 0 {
            return Err(shape_err("unfold_causal", "width must be positive"));
        }
        let vx = self.value(x);
        let mut out = vec![T::zero(); t_len * width * d];
        for t in 0..t_len {
            for k in 0..width {
                let back = width - 1 - k;
                if back > t {
                    continue;
                }
                let src = vx.row(t - back);
                out[(t * width + k) * d..(t * width + k + 1) * d].copy_from_slice(src);
            }
        }
        let g = self.needs(x);
        Ok(self.push(Tensor::matrix(t_len, width * d, out)?, Op::UnfoldCausal { x, width }, g))
    }

    /// Summed binary cross-entropy on logits; positives weigh `pos_weight`.
    pub fn bce_with_logits_sum(&mut self, x: Var, targets: &[T], pos_weight: T) -> Result<Var> {
        let vx = self.value(x).data();
        if vx.len() != targets.len() {
            return Err(shape_err("bce", format!("{} logits, {} targets", vx.len(), targets.len())));
        }
        let mut total = T::zero();
        for (&z, &y) in vx.iter().zip(targets) {
            let w = T::one() + (pos_weight - T::one()) * y;
            let l = z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
            total = total + w * l;
        }
        let g = self.needs(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
                pos_weight,
            },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros if unreached.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Take the op out so parent values can be borrowed while gradient
        // buffers are mutated; it is restored at the end.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(*b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.value(a).data().to_vec();
                let vb = self.value(b).data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(&vb) {
                        *d = *d + s * y;
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(&va) {
                        *d = *d + s * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let m = self.value(*row).len();
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
                if let Some(gr) = self.acc(*row) {
                    for chunk in g.chunks(m) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (a, row) = (*a, *row);
                let m = self.value(row).len();
                let va = self.value(a).data().to_vec();
                let vr = self.value(row).data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for (idx, d) in ga.iter_mut().enumerate() {
                        *d = *d + g[idx] * vr[idx % m];
                    }
                }
                if let Some(gr) = self.acc(row) {
                    for (idx, &s) in g.iter().enumerate() {
                        gr[idx % m] = gr[idx % m] + s * va[idx];
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.acc(*a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + c * s;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(*a) {
                    add_into(ga, g);
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k) = self.dims(a);
                let m = self.dims(b).1;
                if self.needs(a) {
                    let vb = self.value(b).data().to_vec();
                    let ga = self.acc(a).unwrap();
                    matmul_nt(g, &vb, ga, n, m, k);
                }
                if self.needs(b) {
                    let va = self.value(a).data().to_vec();
                    let gb = self.acc(b).unwrap();
                    matmul_tn(&va, g, gb, n, k, m);
                }
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k) = self.dims(a);
                let m = self.dims(b).0;
                if self.needs(a) {
                    let vb = self.value(b).data().to_vec();
                    let ga = self.acc(a).unwrap();
                    matmul_nn(g, &vb, ga, n, m, k);
                }
                if self.needs(b) {
                    let va = self.value(a).data().to_vec();
                    let gb = self.acc(b).unwrap();
                    matmul_tn(g, &va, gb, n, m, k);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = self.dims(*a);
                if let Some(ga) = self.acc(*a) {
                    for r in 0..n {
                        for c in 0..m {
                            ga[r * m + c] = ga[r * m + c] + g[c * n + r];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(&va) {
                        *d = *d + s * gelu_parts(x).1;
                    }
                }
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Exp(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let kind = match &op {
                    Op::Sigmoid(_) => 0,
                    Op::Tanh(_) => 1,
                    _ => 2,
                };
                if let Some(ga) = self.acc(*a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(&y) {
                        let local = match kind {
                            0 => y * (T::one() - y),
                            1 => T::one() - y * y,
                            _ => y,
                        };
                        *d = *d + s * local;
                    }
                }
            }
            Op::Log(a) => {
                let va = self.value(*a).data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(&va) {
                        *d = *d + s / x;
                    }
                }
            }
            Op::Softmax(a) => {
                let (n, m) = self.dims(*a);
                let y = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for r in 0..n {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let inner = kernels::dot(yr, gr);
                        for c in 0..m {
                            ga[r * m + c] = ga[r * m + c] + yr[c] * (gr[c] - inner);
                        }
                    }
                }
            }
            Op::LogSoftmax(a, mask) => {
                let (n, m) = self.dims(*a);
                let y = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(*a) {
                    for r in 0..n {
                        let mut gsum = T::zero();
                        for c in 0..m {
                            if mask.allows(r, c, n, m) {
                                gsum = gsum + g[r * m + c];
                            }
                        }
                        for c in 0..m {
                            if mask.allows(r, c, n, m) {
                                let p = y[r * m + c].exp();
                                ga[r * m + c] = ga[r * m + c] + g[r * m + c] - p * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (n, m) = self.dims(*x);
                let y = self.nodes[i].value.data().to_vec();
                let mf = T::of(m as f64);
                if let Some(gx) = self.acc(*x) {
                    for r in 0..n {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let mean_g = gr.iter().copied().sum::<T>() / mf;
                        let mean_gy = kernels::dot(gr, yr) / mf;
                        for c in 0..m {
                            gx[r * m + c] = gx[r * m + c] + rstd[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.dims(*table).1;
                if let Some(gt) = self.acc(*table) {
                    for (t, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                }
            }
            Op::Conv {
                x,
                kernel,
                dilation,
                causal,
            } => {
                let (x, kernel) = (*x, *kernel);
                let (t_len, d) = self.dims(x);
                let w = self.dims(kernel).0;
                let vx = self.value(x).data().to_vec();
                let vk = self.value(kernel).data().to_vec();
                let mut dx = self.needs(x).then(|| vec![T::zero(); t_len * d]);
                let mut dk = self.needs(kernel).then(|| vec![T::zero(); w * d]);
                depthwise_conv_backward(
                    &vx,
                    &vk,
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    t_len,
                    d,
                    w,
                    *dilation,
                    *causal,
                );
                if let Some(dx) = dx {
                    add_into(self.acc(x).unwrap(), &dx);
                }
                if let Some(dk) = dk {
                    add_into(self.acc(kernel).unwrap(), &dk);
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if let Some(gp) = self.acc(p) {
                        for r in 0..n {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, m) = self.dims(*x);
                let w = self.nodes[i].value.cols();
                let start = *start;
                if let Some(gx) = self.acc(*x) {
                    for r in 0..n {
                        add_into(&mut gx[r * m + start..r * m + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let m = self.dims(*x).1;
                let start = *start;
                if let Some(gx) = self.acc(*x) {
                    add_into(&mut gx[start * m..start * m + g.len()], g);
                }
            }
            Op::PairwiseDist(x) => {
                let (n, d) = self.dims(*x);
                let vx = self.value(*x).data().to_vec();
                let dist = self.nodes[i].value.data().to_vec();
                if let Some(gx) = self.acc(*x) {
                    for a in 0..n {
                        for b in 0..n {
                            let dd = dist[a * n + b];
                            if a == b || dd == T::zero() {
                                continue;
                            }
                            let coef = g[a * n + b] / dd;
                            for c in 0..d {
                                let diff = vx[a * d + c] - vx[b * d + c];
                                gx[a * d + c] = gx[a * d + c] + coef * diff;
                                gx[b * d + c] = gx[b * d + c] - coef * diff;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                if let Some(ga) = self.acc(*a) {
                    for d in ga.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::Select { x, idx } => {
                if let Some(gx) = self.acc(*x) {
                    for (k, &j) in idx.iter().enumerate() {
                        gx[j] = gx[j] + g[k];
                    }
                }
            }
            Op::NllSum { logits, targets, probs } => {
                let v = self.dims(*logits).1;
                let s = g[0];
                if let Some(gl) = self.acc(*logits) {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(y) = *target else { continue };
                        for c in 0..v {
                            gl[r * v + c] = gl[r * v + c] + s * probs[r * v + c];
                        }
                        gl[r * v + y] = gl[r * v + y] - s;
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let m = self.dims(*x).1;
                if let Some(gx) = self.acc(*x) {
                    for (c, &r) in argmax.iter().enumerate() {
                        gx[r * m + c] = gx[r * m + c] + g[c];
                    }
                }
            }
            Op::UnfoldCausal { x, width } => {
                let (t_len, d) = self.dims(*x);
                let width = *width;
                if let Some(gx) = self.acc(*x) {
                    for t in 0..t_len {
                        for k in 0..width {
                            let back = width - 1 - k;
                            if back > t {
                                continue;
                            }
                            let src = t - back;
                            add_into(
                                &mut gx[src * d..(src + 1) * d],
                                &g[(t * width + k) * d..(t * width + k + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::BceWithLogits { x, targets, pos_weight } => {
                let vx = self.value(*x).data().to_vec();
                let s = g[0];
                let pw = *pos_weight;
                if let Some(gx) = self.acc(*x) {
                    for ((d, &z), &y) in gx.iter_mut().zip(&vx).zip(targets) {
                        let w = T::one() + (pw - T::one()) * y;
                        let sig = T::one() / (T::one() + (-z).exp());
                        *d = *d + s * w * (sig - y);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 1.0, 1.0, 1.0, 0.0, 3f64.ln(), 0.0, 0.0]));
        let x = tape.slice_cols(x, 0, 4).unwrap();
        let y = tape.softmax_rows(x, RowMask::None).unwrap();
        let v = tape.value(y).data().to_vec();
        for p in &v[..4] {
            assert!((p - 0.25).abs() < 1e-12);
        }
        let x2 = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let y2 = tape.softmax_rows(x2, RowMask::None).unwrap();
        let v2 = tape.value(y2).data();
        assert!((v2[0] - 0.25).abs() < 1e-12 && (v2[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_f32() {
        let mut tape = Tape::<f32>::new();
        // dyadic inputs so the shifted row is exactly representable in f32
        let row = [0.25f32, -1.5, 2.5, 0.0];
        let a = tape.constant(Tensor::matrix(1, 4, row.to_vec()).unwrap());
        let b = tape.constant(Tensor::matrix(1, 4, row.iter().map(|x| x + 1000.0).collect()).unwrap());
        let ya = tape.softmax_rows(a, RowMask::None).unwrap();
        let yb = tape.softmax_rows(b, RowMask::None).unwrap();
        for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((p - q).abs() < 1e-6);
        }
        let s: f32 = tape.value(ya).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 3], &[1.0; 9]));
        let y = tape.softmax_rows(x, RowMask::Causal).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..24).map(|i| ((i * 37 % 11) as f32) * 0.7 - 3.0).collect();
        let x = tape.constant(Tensor::matrix(3, 8, data).unwrap());
        let y = tape.layer_norm_rows(x).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::matrix(5, 2, (0..10).map(|v| v as f32).collect()).unwrap());
        let k = tape.constant(Tensor::matrix(3, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap());
        let y = tape.depthwise_conv1d(x, k, 4, true).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let bad = tape.constant(Tensor::matrix(3, 3, vec![0.0; 9]).unwrap());
        assert!(tape.depthwise_conv1d(x, bad, 1, true).is_err());
    }

    #[test]
    fn conv_flops_scale_linearly() {
        let mut counts = Vec::new();
        for t_len in [64usize, 128] {
            flops::reset();
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::zeros(&[t_len, 8]));
            let k = tape.constant(Tensor::zeros(&[3, 8]));
            tape.depthwise_conv1d(x, k, 7, true).unwrap();
            counts.push(flops::read(Kernel::Conv));
        }
        assert_eq!(counts[1], 2 * counts[0]);
    }

    #[test]
    fn nll_uniform_is_log_v() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros(&[3, 100]));
        let loss = tape.nll_sum(logits, &[Some(4), None, Some(99)], &RowMask::None).unwrap();
        assert!((tape.value(loss).item() / 2.0 - 100f64.ln()).abs() < 1e-12);
    }
}
