//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward sweep. `backward` walks the nodes once, newest
//! first, accumulating vector-Jacobian products into the inputs.

use super::array::{dot, Array};
use super::gemm::{gemm, View};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    ScaleBy { a: Var, s: Var },
    AddScalar { a: Var, s: Var },
    Exp { a: Var },
    Sigmoid { a: Var },
    Log { a: Var },
    LogSigmoid { a: Var },
    Gelu { a: Var },
    Transpose { a: Var },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, idx: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Softmax { a: Var },
    L2Normalize { a: Var, norms: Vec<f64> },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowDot { a: Var, b: Var },
    Attention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    ranges: Vec<KeyRange>,
    heads: usize,
    weights: Vec<f64>,
    offsets: Vec<usize>,
}

/// Contiguous block of key/value rows visible to one query row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyRange {
    pub start: usize,
    pub len: usize,
}

impl KeyRange {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one backward sweep.
///
/// A tape is confined to a single thread; independent batches use
/// independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient for `v`; zeros when nothing flowed into it.
    pub fn get(&self, v: Var) -> Array {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Array::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Array::zeros(shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn mat(a: &Array) -> View<'_> {
    View::new(a.data(), a.rows(), a.cols())
}

fn check_finite(op: &'static str, a: &Array) -> Result<()> {
    if let Some(bad) = a.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op,
            detail: format!("non-finite input {bad}"),
        });
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; receives a gradient in `backward`.
    pub fn param(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let a = &self.nodes[v.0].value;
        (a.rows(), a.cols())
    }

    fn unary<F: Fn(f64) -> f64>(&self, a: Var, f: F) -> Array {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        Array::new(x.shape().to_vec(), data).expect("unary shape")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn scalar_of(&self, op: &'static str, s: Var) -> Result<f64> {
        let v = self.value(s);
        if v.len() != 1 {
            return Err(Error::dim(op, v.shape(), &[1]));
        }
        Ok(v.data()[0])
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (br, bc) = self.rc(b);
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        {
            let bv = mat(self.value(b));
            let bv = if trans_b { bv.t() } else { bv };
            gemm(mat(self.value(a)), bv, 0.0, &mut out);
        }
        let value = Array::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let x = self.value(a);
        let y = self.value(b);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Array::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a single row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.rc(a);
        if self.value(row).len() != c {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let bias = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow { a, row }, &[a, row]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let x = self.value(a);
        let y = self.value(b);
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Array::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.unary(a, |x| x * s);
        self.push(value, Op::Scale { a, s }, &[a])
    }

    /// Multiplies every element by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of("scale_by", s)?;
        let value = self.unary(a, |x| x * k);
        Ok(self.push(value, Op::ScaleBy { a, s }, &[a, s]))
    }

    /// Adds the single element of `s` to every element.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.scalar_of("add_scalar", s)?;
        let value = self.unary(a, |x| x + k);
        Ok(self.push(value, Op::AddScalar { a, s }, &[a, s]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.unary(a, f64::exp);
        self.push(value, Op::Exp { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.unary(a, sigmoid);
        self.push(value, Op::Sigmoid { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Numeric {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.unary(a, f64::ln);
        Ok(self.push(value, Op::Log { a }, &[a]))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.unary(a, log_sigmoid);
        self.push(value, Op::LogSigmoid { a }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.unary(a, gelu);
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.rc(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let value = Array::new(vec![c, r], out).expect("transpose shape");
        self.push(value, Op::Transpose { a }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Input("concat_rows of nothing".into()));
        };
        let c = self.rc(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.rc(p);
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Array::new(vec![rows, c], data)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Selects rows of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(a);
        if idx.is_empty() {
            return Err(Error::Input("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Input(format!("gather_rows index {bad} out of {r} rows")));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let value = Array::new(vec![idx.len(), c], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Array::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Array::scalar(s), Op::Mean { a }, &[a])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_finite("softmax", self.value(a))?;
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let n = dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateInput {
                    op: "l2_normalize",
                    detail: format!("row {i} has norm {n}"),
                });
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        Ok(self.push(value, Op::L2Normalize { a, norms }, &[a]))
    }

    /// Row-wise layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.rc(a);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", self.shape(a), self.shape(gain)));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let x = self.value(a);
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Array::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[a, gain, bias],
        ))
    }

    /// Row-wise dot products of equally shaped matrices; result is `rows × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let x = self.value(a);
        let y = self.value(b);
        let data: Vec<f64> = (0..x.rows()).map(|i| dot(x.row(i), y.row(i))).collect();
        let value = Array::new(vec![data.len(), 1], data)?;
        Ok(self.push(value, Op::RowDot { a, b }, &[a, b]))
    }

    /// Multi-head scaled dot-product attention where query row `r` attends
    /// to the key/value rows `ranges[r]`.
    ///
    /// Columns are split into `heads` contiguous blocks; logits are scaled by
    /// `1/√(d/heads)`. Output has one row per query.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        ranges: &[KeyRange],
        heads: usize,
    ) -> Result<Var> {
        let (nq, d) = self.rc(q);
        let (nk, dk) = self.rc(k);
        if dk != d || self.rc(v) != (nk, d) {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{d} columns not divisible by {heads} heads")));
        }
        if ranges.len() != nq {
            return Err(Error::dim("attention", &[nq], &[ranges.len()]));
        }
        if let Some(bad) = ranges.iter().find(|r| r.len == 0 || r.start + r.len > nk) {
            return Err(Error::Input(format!("attention range {bad:?} outside {nk} key rows")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qa, ka, va) = (self.value(q), self.value(k), self.value(v));
        let mut offsets = Vec::with_capacity(nq);
        let total: usize = ranges.iter().map(|r| r.len * heads).sum();
        let mut weights = vec![0.0; total];
        let mut out = vec![0.0; nq * d];
        let mut off = 0;
        for (r, range) in ranges.iter().enumerate() {
            offsets.push(off);
            let qrow = qa.row(r);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let w = &mut weights[off + h * range.len..off + (h + 1) * range.len];
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = scale * dot(&qrow[cols.clone()], &ka.row(range.start + j)[cols.clone()]);
                }
                softmax_in_place(w);
                let orow = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for (j, &wj) in w.iter().enumerate() {
                    let vrow = &va.row(range.start + j)[cols.clone()];
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += wj * vv;
                    }
                }
            }
            off += range.len * heads;
        }
        let value = Array::new(vec![nq, d], out)?;
        let rec = AttentionRecord {
            q,
            k,
            v,
            ranges: ranges.to_vec(),
            heads,
            weights,
            offsets,
        };
        Ok(self.push(value, Op::Attention(Box::new(rec)), &[q, k, v]))
    }

    /// Attention weights recorded by an [`Tape::attention`] node for query
    /// row `row`, as a `heads × range.len` array.
    pub fn attention_weights(&self, node: Var, row: usize) -> Option<Array> {
        match &self.nodes[node.0].op {
            Op::Attention(rec) => {
                let len = rec.ranges.get(row)?.len;
                let off = rec.offsets[row];
                let w = rec.weights[off..off + rec.heads * len].to_vec();
                Array::new(vec![rec.heads, len], w).ok()
            }
            _ => None,
        }
    }

    /// Reverse sweep from the single-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, n) = (node.value.rows(), node.value.cols());
                let gv = View::new(g, m, n);
                if self.wants(*a) {
                    let da = acc(grads, *a, av.len());
                    // dA = dC · Bᵀ  (or dC · B when b was used transposed)
                    let bm = mat(bv);
                    let bm = if *trans_b { bm } else { bm.t() };
                    gemm(gv, bm, 1.0, da);
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, bv.len());
                    if *trans_b {
                        gemm(gv.t(), mat(av), 1.0, db);
                    } else {
                        gemm(mat(av).t(), gv, 1.0, db);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        axpy(acc(grads, *v, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*a) {
                    axpy(acc(grads, *a, g.len()), g, 1.0);
                }
                if self.wants(*row) {
                    let c = node.value.cols();
                    let dr = acc(grads, *row, c);
                    for chunk in g.chunks(c) {
                        axpy(dr, chunk, 1.0);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (x, z) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = acc(grads, *a, g.len());
                    for ((d, gi), zi) in da.iter_mut().zip(g).zip(z) {
                        *d += gi * zi;
                    }
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, g.len());
                    for ((d, gi), xi) in db.iter_mut().zip(g).zip(x) {
                        *d += gi * xi;
                    }
                }
            }
            Op::Scale { a, s } => {
                axpy(acc(grads, *a, g.len()), g, *s);
            }
            Op::ScaleBy { a, s } => {
                let k = self.value(*s).data()[0];
                if self.wants(*a) {
                    axpy(acc(grads, *a, g.len()), g, k);
                }
                if self.wants(*s) {
                    let x = self.value(*a).data();
                    acc(grads, *s, 1)[0] += dot(g, x);
                }
            }
            Op::AddScalar { a, s } => {
                if self.wants(*a) {
                    axpy(acc(grads, *a, g.len()), g, 1.0);
                }
                if self.wants(*s) {
                    acc(grads, *s, 1)[0] += g.iter().sum::<f64>();
                }
            }
            Op::Exp { a } => {
                elementwise(acc(grads, *a, g.len()), g, y, |gi, yi| gi * yi);
            }
            Op::Sigmoid { a } => {
                elementwise(acc(grads, *a, g.len()), g, y, |gi, yi| gi * yi * (1.0 - yi));
            }
            Op::Log { a } => {
                let x = self.value(*a).data();
                elementwise(acc(grads, *a, g.len()), g, x, |gi, xi| gi / xi);
            }
            Op::LogSigmoid { a } => {
                let x = self.value(*a).data();
                elementwise(acc(grads, *a, g.len()), g, x, |gi, xi| gi * sigmoid(-xi));
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                elementwise(acc(grads, *a, g.len()), g, x, |gi, xi| gi * gelu_grad(xi));
            }
            Op::Transpose { a } => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let da = acc(grads, *a, g.len());
                // output is r × c, input is c × r
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        axpy(acc(grads, *p, len), &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::GatherRows { a, idx } => {
                let c = node.value.cols();
                let da = acc(grads, *a, self.value(*a).len());
                for (r, &i) in idx.iter().enumerate() {
                    axpy(&mut da[i * c..(i + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                }
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                acc(grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { a } => {
                let len = self.value(*a).len();
                let s = g[0] / len as f64;
                acc(grads, *a, len).iter_mut().for_each(|d| *d += s);
            }
            Op::Softmax { a } => {
                let c = node.value.cols();
                let da = acc(grads, *a, g.len());
                for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let inner = dot(gr, yr);
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - inner);
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                let c = node.value.cols();
                let da = acc(grads, *a, g.len());
                for (((dr, gr), yr), n) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).zip(norms) {
                    let inner = dot(gr, yr);
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += (gi - yi * inner) / n;
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                if self.wants(*gain) {
                    let dg = acc(grads, *gain, c);
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gi), hi) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gi * hi;
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = acc(grads, *bias, c);
                    for gr in g.chunks(c) {
                        axpy(db, gr, 1.0);
                    }
                }
                if self.wants(*a) {
                    let gain_v = self.value(*gain).data();
                    let da = acc(grads, *a, g.len());
                    let cf = c as f64;
                    let mut dh = vec![0.0; c];
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gr[j] * gain_v[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2 = dot(&dh, hr);
                        let inv = inv_std[r];
                        let dr = &mut da[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] += inv / cf * (cf * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::RowDot { a, b } => {
                let (x, z) = (self.value(*a), self.value(*b));
                let c = x.cols();
                if self.wants(*a) {
                    let da = acc(grads, *a, x.len());
                    for (r, gi) in g.iter().enumerate() {
                        axpy(&mut da[r * c..(r + 1) * c], z.row(r), *gi);
                    }
                }
                if self.wants(*b) {
                    let db = acc(grads, *b, z.len());
                    for (r, gi) in g.iter().enumerate() {
                        axpy(&mut db[r * c..(r + 1) * c], x.row(r), *gi);
                    }
                }
            }
            Op::Attention(rec) => self.backprop_attention(rec, g, grads),
        }
    }

    fn backprop_attention(&self, rec: &AttentionRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (qa, ka, va) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let d = qa.cols();
        let dh = d / rec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; qa.len()];
        let mut dk = vec![0.0; ka.len()];
        let mut dv = vec![0.0; va.len()];
        let maxlen = rec.ranges.iter().map(|r| r.len).max().unwrap_or(0);
        let mut ds = vec![0.0; maxlen];
        for (r, range) in rec.ranges.iter().enumerate() {
            let qrow = qa.row(r);
            for h in 0..rec.heads {
                let cols = h * dh..(h + 1) * dh;
                let go = &g[r * d + h * dh..r * d + (h + 1) * dh];
                let off = rec.offsets[r] + h * range.len;
                let w = &rec.weights[off..off + range.len];
                let mut inner = 0.0;
                for j in 0..range.len {
                    let kr = range.start + j;
                    let dw = dot(go, &va.row(kr)[cols.clone()]);
                    ds[j] = dw;
                    inner += w[j] * dw;
                    axpy(&mut dv[kr * d + h * dh..kr * d + (h + 1) * dh], go, w[j]);
                }
                for j in 0..range.len {
                    let kr = range.start + j;
                    let s = w[j] * (ds[j] - inner) * scale;
                    axpy(&mut dq[r * d + h * dh..r * d + (h + 1) * dh], &ka.row(kr)[cols.clone()], s);
                    axpy(&mut dk[kr * d + h * dh..kr * d + (h + 1) * dh], &qrow[cols.clone()], s);
                }
            }
        }
        for (var, grad) in [(rec.q, dq), (rec.k, dk), (rec.v, dv)] {
            if self.wants(var) {
                axpy(acc(grads, var, grad.len()), &grad, 1.0);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn elementwise<F: Fn(f64, f64) -> f64>(dst: &mut [f64], g: &[f64], x: &[f64], f: F) {
    for ((d, gi), xi) in dst.iter_mut().zip(g).zip(x) {
        *d += f(*gi, *xi);
    }
}
