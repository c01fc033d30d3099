//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Graph`] and returns a [`Var`]
//! handle. Inputs of a node always have smaller indices than the node itself,
//! so insertion order is a topological order and the graph is acyclic by
//! construction. [`Graph::backward`] walks the tape in reverse and sums
//! gradient contributions over every use of a node.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        k: Var,
        stride: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: (usize, usize),
    },
    Pool2d {
        x: Var,
        kind: PoolKind,
        window: (usize, usize),
        stride: (usize, usize),
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Select {
        x: Var,
        index: usize,
    },
}

/// An autodiff tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn conv_out(len: usize, w: usize, stride: usize) -> usize {
    (len - w) / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        self.push(value, op, requires)
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients in
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Input handles of a node, in the order the operation consumed them.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        match &self.ops[v.0] {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Act(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv1d { x, k, .. } | Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Pool2d { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Select { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    /// Node indices in an order where every input precedes its consumers, or
    /// a contract error if that order does not exist.
    pub fn topological_order(&self) -> Result<Vec<Var>> {
        for i in 0..self.len() {
            if let Some(bad) = self.inputs(Var(i)).into_iter().find(|v| v.0 >= i) {
                return Err(Error::Contract(format!(
                    "node {i} consumes node {} which is not earlier on the tape",
                    bad.0
                )));
            }
        }
        Ok((0..self.len()).map(Var).collect())
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.values[a.0].dims2("matmul")?;
        let (k2, n) = self.values[b.0].dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.values[a.0].dims2("matmul_nt")?;
        let (k, n2) = self.values[b.0].dims2("matmul_nt")?;
        if n != n2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * k];
        gemm_nt_acc(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, n, k);
        let t = Tensor::new(vec![m, k], out)?;
        Ok(self.push_op(t, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.values[a.0].dims2("transpose")?;
        let src = self.values[a.0].data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push_op(t, Op::Transpose(a), &[a]))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[n]` row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.values[x.0].dims2("add_row")?;
        if self.values[bias.0].numel() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.values[bias.0].data();
        let data = self.values[x.0]
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.values[a.0].map(|x| x * c);
        self.push_op(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.values[a.0].map(|x| x + c);
        self.push_op(t, Op::AddScalar(a), &[a])
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let t = match act {
            Activation::Relu => self.values[a.0].map(|x| x.max(0.0)),
            Activation::Gelu => self.values[a.0].map(gelu),
        };
        self.push_op(t, Op::Act(a, act), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    // ---- normalisation -----------------------------------------------------

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.values[x.0].dims2("softmax_rows")?;
        let src = &self.values[x.0];
        if !src.is_finite() {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        let mut out = vec![0.0; m * n];
        for (row, orow) in src.data().chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::SoftmaxRows(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.values[x.0].dims2("log_softmax_rows")?;
        let src = &self.values[x.0];
        if !src.is_finite() {
            return Err(Error::NonFinite("log_softmax_rows input"));
        }
        let mut out = vec![0.0; m * n];
        for (row, orow) in src.data().chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Normalises every row of `x` `[L×d]` to zero mean and unit variance,
    /// then applies `gamma` and `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (l, d) = self.values[x.0].dims2("layer_norm")?;
        if self.values[gamma.0].numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.values[beta.0].numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(beta)));
        }
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut xhat = vec![0.0; l * d];
        let mut rstd = vec![0.0; l];
        let mut out = vec![0.0; l * d];
        for (i, row) in self.values[x.0].data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![l, d], out)?;
        Ok(self.push_op(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- convolution and pooling ------------------------------------------

    /// Valid cross-correlation of `x` `[L×c_in]` with `kernels`
    /// `[c_out×c_in×w]`, producing `[(L-w)/stride+1 × c_out]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (l, ci) = self.values[x.0].dims2("conv1d")?;
        let (co, kci, w) = match self.shape(kernels)[..] {
            [a, b, c] => (a, b, c),
            _ => return Err(Error::shape("conv1d", self.shape(x), self.shape(kernels))),
        };
        if kci != ci {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(kernels)));
        }
        if stride == 0 {
            return Err(Error::dim("conv1d", "stride must be positive"));
        }
        if w > l {
            return Err(Error::dim("conv1d", format!("kernel width {w} exceeds input length {l}")));
        }
        let lo = conv_out(l, w, stride);
        let patches = im2col_1d(self.values[x.0].data(), ci, w, stride, lo);
        let mut out = vec![0.0; lo * co];
        gemm_nt_acc(&patches, self.values[kernels.0].data(), &mut out, lo, ci * w, co);
        let t = Tensor::new(vec![lo, co], out)?;
        Ok(self.push_op(t, Op::Conv1d { x, k: kernels, stride }, &[x, kernels]))
    }

    /// Valid 2-D cross-correlation of `x` `[H×W×c_in]` with `kernels`
    /// `[c_out×c_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: (usize, usize)) -> Result<Var> {
        let (h, w, ci) = match self.shape(x)[..] {
            [a, b, c] => (a, b, c),
            _ => return Err(Error::dim("conv2d", format!("expected [H×W×C], got {:?}", self.shape(x)))),
        };
        let (co, kci, kh, kw) = match self.shape(kernels)[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("conv2d", self.shape(x), self.shape(kernels))),
        };
        if kci != ci {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(kernels)));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if kh > h || kw > w {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}×{kw} exceeds input {h}×{w}"),
            ));
        }
        let ho = conv_out(h, kh, stride.0);
        let wo = conv_out(w, kw, stride.1);
        let geo = Geo2d {
            w,
            ci,
            kh,
            kw,
            stride,
            ho,
            wo,
        };
        let patches = geo.im2col(self.values[x.0].data());
        let mut out = vec![0.0; ho * wo * co];
        gemm_nt_acc(&patches, self.values[kernels.0].data(), &mut out, ho * wo, ci * kh * kw, co);
        let t = Tensor::new(vec![ho, wo, co], out)?;
        Ok(self.push_op(t, Op::Conv2d { x, k: kernels, stride }, &[x, kernels]))
    }

    /// Windowed reduction over the two leading axes of `[H×W×C]`.
    pub fn pool2d(
        &mut self,
        x: Var,
        kind: PoolKind,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (h, w, c) = match self.shape(x)[..] {
            [a, b, c] => (a, b, c),
            _ => return Err(Error::dim("pool2d", format!("expected [H×W×C], got {:?}", self.shape(x)))),
        };
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim("pool2d", "window and stride must be positive"));
        }
        if window.0 > h || window.1 > w {
            return Err(Error::dim(
                "pool2d",
                format!("window {}×{} larger than input {h}×{w}", window.0, window.1),
            ));
        }
        let ho = conv_out(h, window.0, stride.0);
        let wo = conv_out(w, window.1, stride.1);
        let src = self.values[x.0].data();
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0; ho * wo * c];
        }
        let area = (window.0 * window.1) as f64;
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let o = (oy * wo + ox) * c + ch;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    let mut acc = 0.0;
                    for dy in 0..window.0 {
                        for dx in 0..window.1 {
                            let i = ((oy * stride.0 + dy) * w + ox * stride.1 + dx) * c + ch;
                            acc += src[i];
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out[o] = best;
                            argmax[o] = best_i;
                        }
                        PoolKind::Mean => out[o] = acc / area,
                    }
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, c], out)?;
        Ok(self.push_op(
            t,
            Op::Pool2d {
                x,
                kind,
                window,
                stride,
                argmax,
            },
            &[x],
        ))
    }

    /// Pooling along the rows of `[L×C]`.
    pub fn pool1d(&mut self, x: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let (l, c) = self.values[x.0].dims2("pool1d")?;
        let x3 = self.reshape(x, &[l, 1, c])?;
        let p = self.pool2d(x3, kind, (window, 1), (stride, 1))?;
        let lo = self.shape(p)[0];
        self.reshape(p, &[lo, c])
    }

    // ---- reductions and indexing ------------------------------------------

    /// Mean over the rows of `[L×d]`, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (l, d) = self.values[x.0].dims2("mean_rows")?;
        let mut out = vec![0.0; d];
        for row in self.values[x.0].data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= l as f64);
        Ok(self.push_op(Tensor::vector(out), Op::MeanRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.values[table.0].dims2("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let src = &self.values[table.0];
        let data = idx.iter().flat_map(|&i| src.row(i).iter().copied()).collect();
        let t = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push_op(
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.values[x.0].dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", format!("range {start}..{end} of {n} columns")));
        }
        let data = self.values[x.0]
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let t = Tensor::new(vec![m, end - start], data)?;
        Ok(self.push_op(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.values[x.0].dims2("slice_rows")?;
        if start >= end || end > m {
            return Err(Error::dim("slice_rows", format!("range {start}..{end} of {m} rows")));
        }
        let data = self.values[x.0].data()[start * n..end * n].to_vec();
        let t = Tensor::new(vec![end - start, n], data)?;
        Ok(self.push_op(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "nothing to concatenate"))?;
        let (m, _) = self.values[first.0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.values[p.0].dims2("concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &pn) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.values[p.0].data()[i * pn..(i + 1) * pn]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push_op(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks rank-2 blocks (or rank-1 vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "nothing to concatenate"))?;
        let width = *self.shape(first).last().unwrap_or(&0);
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            let (r, c) = match s[..] {
                [c] => (1, c),
                [r, c] => (r, c),
                _ => return Err(Error::dim("concat_rows", format!("rank > 2 input {s:?}"))),
            };
            if c != width {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += r;
        }
        let data = parts
            .iter()
            .flat_map(|p| self.values[p.0].data().iter().copied())
            .collect();
        let t = Tensor::new(vec![rows, width], data)?;
        Ok(self.push_op(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].reshaped(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    /// Picks one element (flat index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.values[x.0].numel();
        if index >= n {
            return Err(Error::dim("select", format!("index {index} of {n} elements")));
        }
        let t = Tensor::scalar(self.values[x.0].data()[index]);
        Ok(self.push_op(t, Op::Select { x, index }, &[x]))
    }

    // ---- backward ------------------------------------------------------------

    /// Populates `∂loss/∂v` for every node `v` that requires grad and that
    /// `loss` depends on. Gradients from repeated uses are summed; calling
    /// `backward` twice accumulates as well.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        let seed = self.grads[loss.0].get_or_insert_with(|| vec![0.0]);
        seed[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let values = &self.values;
        let requires = &self.requires;
        let grads = &mut self.grads;
        let out = &values[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if requires[v.0] {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].numel()]);
                f(buf);
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let n = values[b.0].shape()[1];
                acc(*a, &mut |da| gemm_nt_acc(g, values[b.0].data(), da, m, n, k));
                acc(*b, &mut |db| gemm_tn_acc(values[a.0].data(), g, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, n) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                let k = values[b.0].shape()[0];
                acc(*a, &mut |da| gemm_acc(g, values[b.0].data(), da, m, k, n));
                acc(*b, &mut |db| gemm_tn_acc(g, values[a.0].data(), db, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                acc(*a, &mut |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::AddRow(x, bias) => {
                let n = values[bias.0].numel();
                acc(*x, &mut |dx| add_into(dx, g));
                acc(*bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                acc(*a, &mut |da| {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi));
            }
            Op::AddScalar(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::Act(a, act) => {
                let xv = values[a.0].data();
                acc(*a, &mut |da| {
                    for ((d, gi), &x) in da.iter_mut().zip(g).zip(xv) {
                        *d += gi
                            * match act {
                                Activation::Relu => f64::from(u8::from(x > 0.0)),
                                Activation::Gelu => gelu_grad(x),
                            };
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = out.shape()[1];
                let y = out.data();
                acc(*x, &mut |dx| {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let n = out.shape()[1];
                let y = out.data();
                acc(*x, &mut |dx| {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        let gs: f64 = gr.iter().sum();
                        for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += gi - yi.exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = values[gamma.0].numel();
                let gm = values[gamma.0].data();
                acc(*x, &mut |dx| {
                    for (r, ((gr, hr), dr)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_gy = 0.0;
                        let mut mean_gyh = 0.0;
                        for j in 0..d {
                            let gy = gr[j] * gm[j];
                            mean_gy += gy;
                            mean_gyh += gy * hr[j];
                        }
                        mean_gy /= d as f64;
                        mean_gyh /= d as f64;
                        for j in 0..d {
                            dr[j] += rstd[r] * (gr[j] * gm[j] - mean_gy - hr[j] * mean_gyh);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for gr in g.chunks(d) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Conv1d { x, k, stride } => {
                let (l, ci) = (values[x.0].shape()[0], values[x.0].shape()[1]);
                let (co, w) = (values[k.0].shape()[0], values[k.0].shape()[2]);
                let lo = out.shape()[0];
                let cols = ci * w;
                acc(*x, &mut |dx| {
                    let mut dpatch = vec![0.0; lo * cols];
                    gemm_acc(g, values[k.0].data(), &mut dpatch, lo, co, cols);
                    col2im_1d(&dpatch, dx, ci, w, *stride, lo, l);
                });
                acc(*k, &mut |dk| {
                    let patches = im2col_1d(values[x.0].data(), ci, w, *stride, lo);
                    gemm_tn_acc(g, &patches, dk, lo, co, cols);
                });
            }
            Op::Conv2d { x, k, stride } => {
                let xs = values[x.0].shape();
                let ks = values[k.0].shape();
                let geo = Geo2d {
                    w: xs[1],
                    ci: xs[2],
                    kh: ks[2],
                    kw: ks[3],
                    stride: *stride,
                    ho: out.shape()[0],
                    wo: out.shape()[1],
                };
                let (co, cols, rows) = (ks[0], geo.ci * geo.kh * geo.kw, geo.ho * geo.wo);
                acc(*x, &mut |dx| {
                    let mut dpatch = vec![0.0; rows * cols];
                    gemm_acc(g, values[k.0].data(), &mut dpatch, rows, co, cols);
                    geo.col2im(&dpatch, dx);
                });
                acc(*k, &mut |dk| {
                    let patches = geo.im2col(values[x.0].data());
                    gemm_tn_acc(g, &patches, dk, rows, co, cols);
                });
            }
            Op::Pool2d {
                x,
                kind,
                window,
                stride,
                argmax,
            } => {
                let (w, c) = (values[x.0].shape()[1], values[x.0].shape()[2]);
                let (ho, wo) = (out.shape()[0], out.shape()[1]);
                acc(*x, &mut |dx| match kind {
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g[o];
                        }
                    }
                    PoolKind::Mean => {
                        let area = (window.0 * window.1) as f64;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                for ch in 0..c {
                                    let go = g[(oy * wo + ox) * c + ch] / area;
                                    for dy in 0..window.0 {
                                        for dxx in 0..window.1 {
                                            let i = ((oy * stride.0 + dy) * w + ox * stride.1 + dxx) * c + ch;
                                            dx[i] += go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (l, d) = (values[x.0].shape()[0], values[x.0].shape()[1]);
                acc(*x, &mut |dx| {
                    for row in dx.chunks_mut(d) {
                        for (r, gi) in row.iter_mut().zip(g) {
                            *r += gi / l as f64;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::GatherRows { table, idx } => {
                let d = values[table.0].shape()[1];
                acc(*table, &mut |dt| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut dt[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = values[x.0].shape()[1];
                let width = out.shape()[1];
                acc(*x, &mut |dx| {
                    for (dr, gr) in dx.chunks_mut(n).zip(g.chunks(width)) {
                        add_into(&mut dr[*start..start + width], gr);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = values[x.0].shape()[1];
                acc(*x, &mut |dx| add_into(&mut dx[start * n..start * n + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pn = values[p.0].shape()[1];
                    acc(p, &mut |dp| {
                        for (dr, gr) in dp.chunks_mut(pn).zip(g.chunks(total)) {
                            add_into(dr, &gr[offset..offset + pn]);
                        }
                    });
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = values[p.0].numel();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::Select { x, index } => acc(*x, &mut |dx| dx[*index] += g[0]),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Patch matrix `[lo × (ci·w)]` with column order `(channel, tap)`, matching
/// the flat layout of `[c_out×c_in×w]` kernels.
fn im2col_1d(x: &[f64], ci: usize, w: usize, stride: usize, lo: usize) -> Vec<f64> {
    let cols = ci * w;
    let mut p = vec![0.0; lo * cols];
    for t in 0..lo {
        for c in 0..ci {
            for j in 0..w {
                p[t * cols + c * w + j] = x[(t * stride + j) * ci + c];
            }
        }
    }
    p
}

fn col2im_1d(dp: &[f64], dx: &mut [f64], ci: usize, w: usize, stride: usize, lo: usize, _l: usize) {
    let cols = ci * w;
    for t in 0..lo {
        for c in 0..ci {
            for j in 0..w {
                dx[(t * stride + j) * ci + c] += dp[t * cols + c * w + j];
            }
        }
    }
}

struct Geo2d {
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    ho: usize,
    wo: usize,
}

impl Geo2d {
    fn src_index(&self, oy: usize, ox: usize, c: usize, a: usize, b: usize) -> usize {
        ((oy * self.stride.0 + a) * self.w + ox * self.stride.1 + b) * self.ci + c
    }

    /// Column order `(channel, ky, kx)`, matching `[c_out×c_in×kh×kw]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.ci * self.kh * self.kw;
        let mut p = vec![0.0; self.ho * self.wo * cols];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let base = (oy * self.wo + ox) * cols;
                for c in 0..self.ci {
                    for a in 0..self.kh {
                        for b in 0..self.kw {
                            p[base + (c * self.kh + a) * self.kw + b] = x[self.src_index(oy, ox, c, a, b)];
                        }
                    }
                }
            }
        }
        p
    }

    fn col2im(&self, dp: &[f64], dx: &mut [f64]) {
        let cols = self.ci * self.kh * self.kw;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let base = (oy * self.wo + ox) * cols;
                for c in 0..self.ci {
                    for a in 0..self.kh {
                        for b in 0..self.kw {
                            dx[self.src_index(oy, ox, c, a, b)] += dp[base + (c * self.kh + a) * self.kw + b];
                        }
                    }
                }
            }
        }
    }
}
