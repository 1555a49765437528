use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    AddRow(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    RowSum(usize),
    BroadcastCols(usize),
    Sum(usize),
    Expand(usize),
    Relu(usize),
    Sigmoid(usize),
    Silu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    ConcatCols(usize, usize),
    SliceCols { input: usize, start: usize },
    PadCols { input: usize, start: usize },
    Pick(usize, Arc<[usize]>),
    Scatter(usize, Arc<[usize]>),
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf { .. } => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | ConcatCols(a, b) => {
                [Some(a), Some(b)]
            }
            Transpose(a)
            | Scale(a, _)
            | Offset(a)
            | SumRows(a)
            | BroadcastRows(a)
            | RowSum(a)
            | BroadcastCols(a)
            | Sum(a)
            | Expand(a)
            | Relu(a)
            | Sigmoid(a)
            | Silu(a)
            | Softmax(a)
            | LogSoftmax(a)
            | SliceCols { input: a, .. }
            | PadCols { input: a, .. }
            | Pick(a, _)
            | Scatter(a, _) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Tensor>,
}

/// Eagerly evaluated gradient tape.
///
/// Nodes are appended in evaluation order, so node indices are a topological
/// order. Every op checks its output for NaN/Inf and fails instead of
/// propagating it.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::UnknownNode)
        }
    }

    fn var(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn dims2(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        let s = self.val(i).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn dims1(&self, i: usize, op: &'static str) -> Result<usize> {
        let s = self.val(i).shape();
        if s.len() != 1 {
            return Err(Error::shape(op, format!("expected a vector, got shape {s:?}")));
        }
        Ok(s[0])
    }

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    /// Records an input tensor. Leaves with `requires_grad` accumulate
    /// gradients during [`Graph::backpropagate`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf { requires_grad }, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Value of a recorded node.
    ///
    /// Panics if `v` belongs to a different graph.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("Var from a different graph");
        self.val(i)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf, if any has been written.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.check(v).ok().and_then(|i| self.nodes[i].grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (n, k) = self.dims2(ia, "matmul")?;
        let (k2, m) = self.dims2(ib, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let out = matmul_raw(self.val(ia).data(), self.val(ib).data(), n, k, m);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(ia, ib), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (n, m) = self.dims2(ia, "transpose")?;
        let src = self.val(ia).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::Transpose(ia), "transpose")
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, name)?;
        let out = self.val(ia).zip_map(self.val(ib), f)?;
        self.push(out, op(ia, ib), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).scale(c);
        self.push(out, Op::Scale(ia, c), "scale")
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(|v| v + c);
        self.push(out, Op::Offset(ia), "offset")
    }

    /// `a[n, m] + b[m]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (n, m) = self.dims2(ia, "add_row")?;
        let mb = self.dims1(ib, "add_row")?;
        if m != mb {
            return Err(Error::shape("add_row", format!("[{n},{m}] + [{mb}]")));
        }
        let bias = self.val(ib).data();
        let mut out = self.val(ia).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::AddRow(ia, ib), "add_row")
    }

    /// Column sums: `[n, m] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (_, m) = self.dims2(ia, "sum_rows")?;
        let mut out = vec![0.0; m];
        for row in self.val(ia).data().chunks(m) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::from_parts(vec![m], out), Op::SumRows(ia), "sum_rows")
    }

    /// Repeats a vector as `n` rows: `[m] -> [n, m]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let m = self.dims1(ia, "broadcast_rows")?;
        let src = self.val(ia).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::BroadcastRows(ia),
            "broadcast_rows",
        )
    }

    /// Per-row sums over the last axis: `[n, m] -> [n]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (n, m) = self.dims2(ia, "row_sum")?;
        let out: Vec<f64> = if m == 0 {
            vec![0.0; n]
        } else {
            self.val(ia).data().chunks(m).map(|r| r.iter().sum()).collect()
        };
        self.push(Tensor::from_parts(vec![n], out), Op::RowSum(ia), "row_sum")
    }

    /// Repeats each element of a vector across `m` columns: `[n] -> [n, m]`.
    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.dims1(ia, "broadcast_cols")?;
        let src = self.val(ia).data();
        let mut out = Vec::with_capacity(n * m);
        for &v in src {
            out.extend(std::iter::repeat(v).take(m));
        }
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::BroadcastCols(ia),
            "broadcast_cols",
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).sum();
        self.push(Tensor::scalar(s), Op::Sum(ia), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        if self.val(ia).len() != 1 {
            return Err(Error::shape("expand", "input must hold one element"));
        }
        let v = self.val(ia).data()[0];
        self.push(Tensor::full(shape, v), Op::Expand(ia), "expand")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(|v| v.max(0.0));
        self.push(out, Op::Relu(ia), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(sigmoid);
        self.push(out, Op::Sigmoid(ia), "sigmoid")
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(ia), "silu")
    }

    /// Row-wise softmax of an `[n, m]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (n, m) = self.dims2(ia, "softmax")?;
        let mut out = vec![0.0; n * m];
        for (src, dst) in self.val(ia).data().chunks(m).zip(out.chunks_mut(m)) {
            softmax_row(src, dst);
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::Softmax(ia), "softmax")
    }

    /// Row-wise log-softmax of an `[n, m]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (n, m) = self.dims2(ia, "log_softmax")?;
        let mut out = vec![0.0; n * m];
        for (src, dst) in self.val(ia).data().chunks(m).zip(out.chunks_mut(m)) {
            log_softmax_row(src, dst);
        }
        self.push(
            Tensor::from_parts(vec![n, m], out),
            Op::LogSoftmax(ia),
            "log_softmax",
        )
    }

    /// `[n, p] ‖ [n, q] -> [n, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (n, p) = self.dims2(ia, "concat_cols")?;
        let (n2, q) = self.dims2(ib, "concat_cols")?;
        if n != n2 {
            return Err(Error::shape("concat_cols", format!("{n} rows vs {n2} rows")));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&self.val(ia).data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&self.val(ib).data()[i * q..(i + 1) * q]);
        }
        self.push(
            Tensor::from_parts(vec![n, p + q], out),
            Op::ConcatCols(ia, ib),
            "concat_cols",
        )
    }

    /// Columns `start..start + len` of an `[n, m]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (n, m) = self.dims2(ia, "slice_cols")?;
        if start + len > m {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {m}")));
        }
        let src = self.val(ia).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        self.push(
            Tensor::from_parts(vec![n, len], out),
            Op::SliceCols { input: ia, start },
            "slice_cols",
        )
    }

    /// Embeds `[n, len]` into zero columns of an `[n, width]` matrix at `start`.
    pub fn pad_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (n, len) = self.dims2(ia, "pad_cols")?;
        if start + len > width {
            return Err(Error::shape("pad_cols", format!("{start}+{len} > {width}")));
        }
        let src = self.val(ia).data();
        let mut out = vec![0.0; n * width];
        for i in 0..n {
            out[i * width + start..i * width + start + len]
                .copy_from_slice(&src[i * len..(i + 1) * len]);
        }
        self.push(
            Tensor::from_parts(vec![n, width], out),
            Op::PadCols { input: ia, start },
            "pad_cols",
        )
    }

    /// Selects `a[i, idx[i]]` from each row: `[n, m] -> [n]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.pick_shared(a, Arc::from(idx))
    }

    fn pick_shared(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let ia = self.check(a)?;
        let (n, m) = self.dims2(ia, "pick")?;
        if idx.len() != n {
            return Err(Error::shape("pick", format!("{} indices for {n} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(Error::OutOfRange {
                what: "column index",
                index: bad,
                limit: m,
            });
        }
        let src = self.val(ia).data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| src[i * m + j]).collect();
        self.push(Tensor::from_parts(vec![n], out), Op::Pick(ia, idx), "pick")
    }

    fn scatter(&mut self, a: Var, idx: Arc<[usize]>, m: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.dims1(ia, "scatter")?;
        let src = self.val(ia).data();
        let mut out = vec![0.0; n * m];
        for (i, &j) in idx.iter().enumerate() {
            out[i * m + j] = src[i];
        }
        self.push(Tensor::from_parts(vec![n, m], out), Op::Scatter(ia, idx), "scatter")
    }

    /// `x · W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Emits cotangent contributions for the inputs of node `i` that are
    /// marked relevant.
    fn vjp_rule(&mut self, i: usize, g: Var, relevant: &[bool]) -> Result<Vec<(usize, Var)>> {
        let op = self.nodes[i].op.clone();
        let rel = |j: usize| relevant.get(j).copied().unwrap_or(false);
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if rel(a) {
                    let bt = self.transpose(self.var(b))?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if rel(b) {
                    let at = self.transpose(self.var(a))?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::Add(a, b) => {
                if rel(a) {
                    out.push((a, g));
                }
                if rel(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if rel(a) {
                    out.push((a, g));
                }
                if rel(b) {
                    out.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if rel(a) {
                    out.push((a, self.mul(g, self.var(b))?));
                }
                if rel(b) {
                    out.push((b, self.mul(g, self.var(a))?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::Offset(a) => out.push((a, g)),
            Op::AddRow(a, b) => {
                if rel(a) {
                    out.push((a, g));
                }
                if rel(b) {
                    out.push((b, self.sum_rows(g)?));
                }
            }
            Op::SumRows(a) => {
                let n = self.val(a).rows();
                out.push((a, self.broadcast_rows(g, n)?));
            }
            Op::BroadcastRows(a) => out.push((a, self.sum_rows(g)?)),
            Op::RowSum(a) => {
                let m = self.val(a).cols();
                out.push((a, self.broadcast_cols(g, m)?));
            }
            Op::BroadcastCols(a) => out.push((a, self.row_sum(g)?)),
            Op::Sum(a) => {
                let shape = self.val(a).shape().to_vec();
                out.push((a, self.expand(g, &shape)?));
            }
            Op::Expand(a) => {
                let s = self.sum(g)?;
                let shape = self.val(a).shape().to_vec();
                // Restore the input's own single-element shape.
                let s = if shape.is_empty() { s } else { self.expand(s, &shape)? };
                out.push((a, s));
            }
            Op::Relu(a) => {
                let mask = self.val(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask)?;
                out.push((a, self.mul(g, mask)?));
            }
            Op::Sigmoid(a) => {
                let s = self.var(i);
                let one_minus = self.scale(s, -1.0)?;
                let one_minus = self.offset(one_minus, 1.0)?;
                let ds = self.mul(s, one_minus)?;
                out.push((a, self.mul(g, ds)?));
            }
            Op::Silu(a) => {
                // d/dx x·σ(x) = σ + x·σ·(1 − σ)
                let x = self.var(a);
                let s = self.sigmoid(x)?;
                let one_minus = self.scale(s, -1.0)?;
                let one_minus = self.offset(one_minus, 1.0)?;
                let xs = self.mul(x, s)?;
                let t = self.mul(xs, one_minus)?;
                let d = self.add(s, t)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Softmax(a) => {
                let s = self.var(i);
                let m = self.val(a).cols();
                let gs = self.mul(g, s)?;
                let dot = self.row_sum(gs)?;
                let dot = self.broadcast_cols(dot, m)?;
                let centered = self.sub(g, dot)?;
                out.push((a, self.mul(s, centered)?));
            }
            Op::LogSoftmax(a) => {
                let m = self.val(a).cols();
                let s = self.softmax(self.var(a))?;
                let total = self.row_sum(g)?;
                let total = self.broadcast_cols(total, m)?;
                let st = self.mul(s, total)?;
                out.push((a, self.sub(g, st)?));
            }
            Op::ConcatCols(a, b) => {
                let p = self.val(a).cols();
                let q = self.val(b).cols();
                if rel(a) {
                    out.push((a, self.slice_cols(g, 0, p)?));
                }
                if rel(b) {
                    out.push((b, self.slice_cols(g, p, q)?));
                }
            }
            Op::SliceCols { input, start } => {
                let width = self.val(input).cols();
                out.push((input, self.pad_cols(g, start, width)?));
            }
            Op::PadCols { input, start } => {
                let len = self.val(input).cols();
                out.push((input, self.slice_cols(g, start, len)?));
            }
            Op::Pick(a, idx) => {
                let m = self.val(a).cols();
                out.push((a, self.scatter(g, idx, m)?));
            }
            Op::Scatter(a, idx) => out.push((a, self.pick_shared(g, idx)?)),
        }
        Ok(out)
    }

    /// Marks nodes that lie on some path from a node in `sources` to `output`.
    fn relevance(&self, output: usize, is_source: impl Fn(usize, &Op) -> bool) -> Vec<bool> {
        let mut ancestor = vec![false; output + 1];
        ancestor[output] = true;
        for i in (0..=output).rev() {
            if !ancestor[i] {
                continue;
            }
            for j in self.nodes[i].op.inputs().into_iter().flatten() {
                ancestor[j] = true;
            }
        }
        let mut relevant = vec![false; output + 1];
        for i in 0..=output {
            if !ancestor[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            relevant[i] = is_source(i, op)
                || op
                    .inputs()
                    .into_iter()
                    .flatten()
                    .any(|j| relevant[j]);
        }
        relevant
    }

    /// Reverse sweep from `output` seeded with `seed`, restricted to `relevant`.
    fn sweep(&mut self, output: usize, seed: Var, relevant: &[bool]) -> Result<Vec<Option<Var>>> {
        let mut cot: Vec<Option<Var>> = vec![None; output + 1];
        cot[output] = Some(seed);
        for i in (0..=output).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = cot[i] else { continue };
            for (j, contrib) in self.vjp_rule(i, g, relevant)? {
                cot[j] = Some(match cot[j] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(cot)
    }

    /// Adds `d(output · cotangent)/d(leaf)` into every leaf created with
    /// `requires_grad`. Gradients accumulate; call [`Graph::zero_grad`] to
    /// reset them.
    pub fn backpropagate(&mut self, output: Var, cotangent: &Tensor) -> Result<()> {
        let out = self.check(output)?;
        if self.val(out).shape() != cotangent.shape() {
            return Err(Error::shape(
                "backpropagate",
                format!(
                    "cotangent {:?} vs output {:?}",
                    cotangent.shape(),
                    self.val(out).shape()
                ),
            ));
        }
        let mark = self.nodes.len();
        let relevant = self.relevance(out, |_, op| matches!(op, Op::Leaf { requires_grad: true }));
        let seed = self.constant(cotangent.clone())?;
        let cot = self.sweep(out, seed, &relevant)?;
        let mut updates = Vec::new();
        for (i, c) in cot.iter().enumerate() {
            if let (Some(c), Op::Leaf { requires_grad: true }) = (c, &self.nodes[i].op) {
                updates.push((i, self.val(c.index).clone()));
            }
        }
        // The backward nodes are not referenced by any returned handle.
        self.nodes.truncate(mark);
        for (i, g) in updates {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Builds `d(output)/d(wrt_k)` as new nodes, so the result can itself be
    /// differentiated. `output` must hold a single element. Inputs that do
    /// not influence `output` get an all-zero constant.
    pub fn gradients(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out = self.check(output)?;
        if self.val(out).len() != 1 {
            return Err(Error::shape(
                "gradients",
                format!("output must be scalar, got {:?}", self.val(out).shape()),
            ));
        }
        let targets: Vec<usize> = wrt.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let relevant = self.relevance(out, |i, _| targets.contains(&i));
        let shape = self.val(out).shape().to_vec();
        let seed = self.constant(Tensor::full(&shape, 1.0))?;
        let cot = self.sweep(out, seed, &relevant)?;
        targets
            .iter()
            .map(|&t| match cot.get(t).copied().flatten() {
                Some(v) => Ok(v),
                None => {
                    let z = Tensor::zeros(self.val(t).shape());
                    self.constant(z)
                }
            })
            .collect()
    }

    /// Value of `d(output)/d(input)` for a scalar `output`. Leaf gradient
    /// accumulators are untouched and the graph is left as it was.
    pub fn input_gradient(&mut self, output: Var, input: Var) -> Result<Tensor> {
        let mark = self.nodes.len();
        let g = self.gradients(output, &[input])?;
        let value = self.val(g[0].index).clone();
        self.nodes.truncate(mark);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_sum() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(g.value(x).data(), &[1.0, 2.0, 3.0]);
        let s = g.sum(x).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.5)).unwrap();
        g.backpropagate(x, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backpropagate(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backpropagate(s, &Tensor::scalar(1.0)).unwrap();
        g.backpropagate(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn cotangent_shape_is_checked() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(g.backpropagate(x, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Graph::new();
        let mut b = Graph::new();
        let x = a.variable(Tensor::scalar(1.0)).unwrap();
        let _ = b.variable(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            b.backpropagate(x, &Tensor::scalar(1.0)),
            Err(Error::UnknownNode)
        ));
    }

    #[test]
    fn non_finite_values_abort() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
        assert!(g.leaf(Tensor::scalar(f64::NAN), false).is_err());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_input_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.3, -7.0])).unwrap();
        let w = g.constant(t(&[2, 1], &[3.0, -1.0])).unwrap();
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grad = g.input_gradient(s, x).unwrap();
        assert_eq!(grad.data(), &[3.0, -1.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        // f(x) = x³, f'(x) = 3x², f''(x) = 6x
        let mut g = Graph::new();
        let x = g.variable(t(&[1], &[2.0])).unwrap();
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let f = g.sum(x3).unwrap();
        let d1 = g.gradients(f, &[x]).unwrap()[0];
        assert_eq!(g.value(d1).data(), &[12.0]);
        let d1s = g.sum(d1).unwrap();
        let d2 = g.gradients(d1s, &[x]).unwrap()[0];
        assert_eq!(g.value(d2).data(), &[12.0]);
    }

    #[test]
    fn unreachable_input_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.variable(t(&[2], &[1.0, 2.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.gradients(s, &[y]).unwrap();
        assert_eq!(g.value(grads[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0])).unwrap();
        let s = g.softmax(x).unwrap();
        for r in 0..2 {
            let total: f64 = g.value(s).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pick_rejects_bad_index() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.pick(x, &[0, 3]), Err(Error::OutOfRange { .. })));
    }
}
