//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the records in reverse and produces gradients for
//! every node that depends on a parameter or on a leaf created with
//! `requires_grad = true`. The tape is meant to be dropped after backward.

use std::collections::HashMap;

use crate::error::{KernelError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Relu,
    Tanh,
    Exp,
    Log,
    Softplus,
    Abs,
    Cos,
    Sin,
    Square,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (n x c) + b (1 x c)` broadcast over rows.
    AddRow(Var, Var),
    /// `a (n x c) * b (1 x c)` broadcast over rows.
    MulRow(Var, Var),
    /// `a (n x c) * b (n x 1)` broadcast over columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    LayerNorm { input: Var, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    EdgeAttention(Box<EdgeAttentionRecord>),
}

#[derive(Debug, Clone)]
struct EdgeAttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    offsets: Vec<usize>,
    heads: usize,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients, suitable for [`ParamStore::add_grads`].
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g.clone())))
            .collect()
    }

    /// Add parameter gradients into the store (accumulating).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(id);
                for (dst, src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, detail: String) -> KernelError {
    KernelError::ShapeMismatch { op, detail }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T (k x n)^T * g (k x m)` where `a` is stored as k x n.
fn matmul_tn_into(a: &[f64], g: &[f64], out: &mut [f64], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let grow = &g[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out (n x k) += g (n x m) * b^T` where `b` is stored as k x m.
fn matmul_nt_into(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is valid")
    }

    /// Input or constant matrix.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape");
        self.push(rows, cols, value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        self.leaf(rows, cols, value, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Bring a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = store.get(id);
        let (rows, cols) = p.value.as_matrix_dims();
        let v = self.push(rows, cols, p.value.data().to_vec(), Op::Param, p.trainable);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(mismatch("matmul", format!("{n}x{k} * {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a), self.value(b), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(n, m, out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(mismatch("add_row", format!("{r}x{c} + {:?}", self.shape(row))));
        }
        let b = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(mismatch("mul_row", format!("{r}x{c} * {:?}", self.shape(row))));
        }
        let b = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(b).map(|(x, y)| x * y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::MulRow(a, row), ng))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(mismatch("mul_col", format!("{r}x{c} * {:?}", self.shape(col))));
        }
        let b = self.value(col);
        let out = self
            .value(a)
            .chunks(c)
            .zip(b)
            .flat_map(|(chunk, s)| chunk.iter().map(move |x| x * s))
            .collect();
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(r, c, out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let (r, c) = self.shape(a);
        let f: fn(f64) -> f64 = match u {
            Unary::Relu => |x| x.max(0.0),
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => softplus,
            Unary::Abs => f64::abs,
            Unary::Cos => f64::cos,
            Unary::Sin => f64::sin,
            Unary::Square => |x| x * x,
            Unary::Sqrt => f64::sqrt,
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Unary(a, u), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `n x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; c];
        for chunk in self.value(a).chunks(c) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        let _ = r;
        let ng = self.ng(a);
        self.push(1, c, out, Op::SumRows(a), ng)
    }

    /// Row sums: `n x c -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).chunks(c).map(|ch| ch.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumCols(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        if let Some(p) = parts.iter().find(|p| self.shape(**p).0 != rows) {
            return Err(mismatch("concat_cols", format!("rows {rows} vs {:?}", self.shape(*p))));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let c = self.shape(*p).1;
                out.extend_from_slice(&self.value(*p)[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        if let Some(p) = parts.iter().find(|p| self.shape(**p).1 != cols) {
            return Err(mismatch("concat_rows", format!("cols {cols} vs {:?}", self.shape(*p))));
        }
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c || len == 0 {
            return Err(mismatch("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|ch| ch[start..start + len].iter().copied())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    /// Select rows by index (repeats allowed). Backward scatter-adds.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.is_empty() {
            return Err(mismatch("gather", "empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(mismatch("gather", format!("row {bad} of {r}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(idx.len(), c, out, Op::Gather(a, idx.to_vec()), ng))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather(a, &[i])
    }

    /// Value copy with no gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).to_vec();
        self.constant(r, c, v)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        for ch in self.value(a).chunks(c) {
            let mean = ch.iter().sum::<f64>() / c as f64;
            let var = ch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            out.extend(ch.iter().map(|x| (x - mean) * rs));
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::LayerNorm { input: a, rstd }, ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for ch in self.value(a).chunks(c) {
            let m = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = ch.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|x| x / s));
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = Vec::with_capacity(r * c);
        for ch in self.value(a).chunks(c) {
            let m = ch.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + ch.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            out.extend(ch.iter().map(|x| x - lse));
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::LogSoftmax(a), ng)
    }

    /// Multi-head scaled dot-product attention over a sparse edge list.
    ///
    /// Edges are grouped by query: the keys/values of query `i` are rows
    /// `offsets[i]..offsets[i + 1]` of `k` and `v`. Queries with no edges
    /// produce a zero row. Returns the output and the list of such
    /// fully-masked query rows.
    pub fn edge_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        offsets: &[usize],
        heads: usize,
    ) -> Result<(Var, Vec<usize>)> {
        let (nq, d) = self.shape(q);
        if heads == 0 || d % heads != 0 {
            return Err(KernelError::HeadCount { heads, width: d });
        }
        if offsets.len() != nq + 1 || offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(mismatch("edge_attention", format!("bad offsets for {nq} queries")));
        }
        let ne = *offsets.last().unwrap();
        let ks = self.shape(k);
        let vs = self.shape(v);
        if ne > 0 && (ks != (ne, d) || vs != (ne, d)) {
            return Err(mismatch(
                "edge_attention",
                format!("q {nq}x{d}, k {ks:?}, v {vs:?}, edges {ne}"),
            ));
        }
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = vec![0.0; nq * d];
        let mut probs = vec![0.0; ne * heads];
        let mut empty = Vec::new();
        let mut scores = Vec::new();
        for i in 0..nq {
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            if lo == hi {
                empty.push(i);
                continue;
            }
            for h in 0..heads {
                let qh = &qv[i * d + h * dh..i * d + (h + 1) * dh];
                scores.clear();
                for e in lo..hi {
                    let kh = &kv[e * d + h * dh..e * d + (h + 1) * dh];
                    scores.push(qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * inv);
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, e) in (lo..hi).enumerate() {
                    let p = scores[j] / z;
                    probs[e * heads + h] = p;
                    let vh = &vv[e * d + h * dh..e * d + (h + 1) * dh];
                    for (o, x) in orow.iter_mut().zip(vh) {
                        *o += p * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let rec = EdgeAttentionRecord {
            q,
            k,
            v,
            offsets: offsets.to_vec(),
            heads,
            probs,
        };
        let var = self.push(nq, d, out, Op::EdgeAttention(Box::new(rec)), ng);
        Ok((var, empty))
    }

    /// Attention weights recorded by an [`edge_attention`](Self::edge_attention)
    /// node, laid out as `[edge][head]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::EdgeAttention(rec) => Some(&rec.probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(KernelError::NonScalarLoss { rows: r, cols: c });
        }
        if !self.ng(loss) {
            return Err(KernelError::DetachedGraph);
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.needs_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]))
        }

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (nr, k) = self.shape(*a);
                    let m = self.shape(*b).1;
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let ga = acc(&mut grads, nodes, *a).unwrap();
                        matmul_nt_into(&g, bv, ga, nr, k, m);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let gb = acc(&mut grads, nodes, *b).unwrap();
                        matmul_tn_into(av, &g, gb, nr, k, m);
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for ((x, y), z) in ga.iter_mut().zip(&g).zip(bv) {
                            *x += y * z;
                        }
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        for ((x, y), z) in gb.iter_mut().zip(&g).zip(av) {
                            *x += y * z;
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    let c = node.cols;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        for ch in g.chunks(c) {
                            gb.iter_mut().zip(ch).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::MulRow(a, b) => {
                    let c = node.cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (gch, och) in ga.chunks_mut(c).zip(g.chunks(c)) {
                            for ((x, y), z) in gch.iter_mut().zip(och).zip(bv) {
                                *x += y * z;
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        for (ach, och) in av.chunks(c).zip(g.chunks(c)) {
                            for ((x, y), z) in gb.iter_mut().zip(och).zip(ach) {
                                *x += y * z;
                            }
                        }
                    }
                }
                Op::MulCol(a, b) => {
                    let c = node.cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for ((gch, och), s) in ga.chunks_mut(c).zip(g.chunks(c)).zip(bv) {
                            for (x, y) in gch.iter_mut().zip(och) {
                                *x += y * s;
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        for ((x, och), ach) in gb.iter_mut().zip(g.chunks(c)).zip(av.chunks(c)) {
                            *x += och.iter().zip(ach).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y * s);
                    }
                }
                Op::AddScalar(a) => {
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Unary(a, u) => {
                    let av = self.value(*a);
                    let out = &node.value;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for i in 0..g.len() {
                            let x = av[i];
                            let d = match u {
                                Unary::Relu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Tanh => 1.0 - out[i] * out[i],
                                Unary::Exp => out[i],
                                Unary::Log => 1.0 / x,
                                Unary::Softplus => sigmoid(x),
                                Unary::Abs => {
                                    if x > 0.0 {
                                        1.0
                                    } else if x < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Cos => -x.sin(),
                                Unary::Sin => x.cos(),
                                Unary::Square => 2.0 * x,
                                Unary::Sqrt => 0.5 / out[i],
                            };
                            ga[i] += g[i] * d;
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::SumRows(a) => {
                    let c = node.cols;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for ch in ga.chunks_mut(c) {
                            ch.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::SumCols(a) => {
                    let c = self.shape(*a).1;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (ch, y) in ga.chunks_mut(c).zip(&g) {
                            ch.iter_mut().for_each(|x| *x += y);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = self.shape(*a);
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = node.cols;
                    let mut off = 0;
                    for p in parts {
                        let pc = self.shape(*p).1;
                        if let Some(gp) = acc(&mut grads, nodes, *p) {
                            for (i, ch) in gp.chunks_mut(pc).enumerate() {
                                let src = &g[i * cols + off..i * cols + off + pc];
                                ch.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                            }
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        if let Some(gp) = acc(&mut grads, nodes, *p) {
                            gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                        }
                        off += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let c = self.shape(*a).1;
                    let len = node.cols;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (ch, src) in ga.chunks_mut(c).zip(g.chunks(len)) {
                            ch[*start..start + len].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    let c = node.cols;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (src, &i) in g.chunks(c).zip(idx) {
                            ga[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::LayerNorm { input, rstd } => {
                    let c = node.cols;
                    let y = &node.value;
                    if let Some(ga) = acc(&mut grads, nodes, *input) {
                        for (i, rs) in rstd.iter().enumerate() {
                            let gy = &g[i * c..(i + 1) * c];
                            let yy = &y[i * c..(i + 1) * c];
                            let mg = gy.iter().sum::<f64>() / c as f64;
                            let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                ga[i * c + j] += rs * (gy[j] - mg - yy[j] * mgy);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let c = node.cols;
                    let y = &node.value;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (i, (gch, ych)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                            let dot: f64 = gch.iter().zip(ych).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                ga[i * c + j] += ych[j] * (gch[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let c = node.cols;
                    let y = &node.value;
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (i, (gch, ych)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                            let s: f64 = gch.iter().sum();
                            for j in 0..c {
                                ga[i * c + j] += gch[j] - ych[j].exp() * s;
                            }
                        }
                    }
                }
                Op::EdgeAttention(rec) => {
                    self.edge_attention_backward(rec, &g, &mut grads);
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| (id, v.0))
            .collect::<Vec<_>>();
        let mut params = params;
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn edge_attention_backward(&self, rec: &EdgeAttentionRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (nq, d) = self.shape(rec.q);
        let heads = rec.heads;
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let ne = *rec.offsets.last().unwrap();
        if ne == 0 {
            return;
        }
        let qv = self.value(rec.q);
        let kv = self.value(rec.k);
        let vv = self.value(rec.v);
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; ne * d];
        let mut gv = vec![0.0; ne * d];
        let mut dp = Vec::new();
        for i in 0..nq {
            let (lo, hi) = (rec.offsets[i], rec.offsets[i + 1]);
            if lo == hi {
                continue;
            }
            for h in 0..heads {
                let span = h * dh..(h + 1) * dh;
                let go = &g[i * d + span.start..i * d + span.end];
                dp.clear();
                let mut pdp = 0.0;
                for e in lo..hi {
                    let p = rec.probs[e * heads + h];
                    let vh = &vv[e * d + span.start..e * d + span.end];
                    let x: f64 = go.iter().zip(vh).map(|(a, b)| a * b).sum();
                    dp.push(x);
                    pdp += p * x;
                    let gvh = &mut gv[e * d + span.start..e * d + span.end];
                    gvh.iter_mut().zip(go).for_each(|(a, b)| *a += p * b);
                }
                for (j, e) in (lo..hi).enumerate() {
                    let p = rec.probs[e * heads + h];
                    let ds = p * (dp[j] - pdp) * inv;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in span.clone() {
                        gq[i * d + t] += ds * kv[e * d + t];
                        gk[e * d + t] += ds * qv[i * d + t];
                    }
                }
            }
        }
        for (var, src) in [(rec.q, gq), (rec.k, gk), (rec.v, gv)] {
            let node = &self.nodes[var.0];
            if !node.needs_grad {
                continue;
            }
            let dst = grads[var.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]);
            dst.iter_mut().zip(&src).for_each(|(a, b)| *a += b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0], true);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut t = Tape::new();
        let vals = vec![1.5, -2.0, 0.25];
        let x = t.leaf(1, 3, vals.clone(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), vals.as_slice());
    }

    #[test]
    fn backward_through_constants_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(1, 2, vec![1.0, 2.0]);
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap_err(), KernelError::DetachedGraph);
        let y = t.leaf(1, 2, vec![1.0, 2.0], true);
        let d = t.detach(y);
        let s = t.sum(d);
        assert_eq!(t.backward(s).unwrap_err(), KernelError::DetachedGraph);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0], true);
        assert!(matches!(t.backward(x), Err(KernelError::NonScalarLoss { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(2, 3, vec![1.0, 2.0, 3.0, -100.0, 0.0, 100.0]);
        let s = t.softmax(x);
        for row in t.value(s).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_attention_empty_rows_are_flagged_and_zero() {
        let mut t = Tape::new();
        let q = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let k = t.constant(1, 2, vec![1.0, 1.0]);
        let v = t.constant(1, 2, vec![3.0, 4.0]);
        let (o, empty) = t.edge_attention(q, k, v, &[0, 1, 1], 1).unwrap();
        assert_eq!(empty, vec![1]);
        assert_eq!(t.value(o), &[3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]);
        let b = t.constant(2, 3, vec![0.0; 6]);
        assert!(t.matmul(a, b).is_err());
        let q = t.constant(1, 6, vec![0.0; 6]);
        assert!(matches!(
            t.edge_attention(q, q, q, &[0, 1], 4),
            Err(KernelError::HeadCount { heads: 4, width: 6 })
        ));
    }
}
