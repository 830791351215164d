//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into the
//! parameters that were read through [`Tape::param`].

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{softmax_row, Tensor};
use crate::NnError;
use std::collections::HashMap;

/// Smallest argument passed to `ln`.
pub const LN_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param { store: u64, id: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm(usize, f64),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SumCols(usize),
    MeanGroups(usize, usize),
    GatherMean(usize, Vec<Vec<usize>>),
    PickPerRow(usize, Vec<usize>),
    BlockMatMulNT(usize, usize, usize),
    BlockMatMul(usize, usize, usize),
    PlackettLuce(usize, Vec<Vec<usize>>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), usize>,
}

fn shape_err(op: &str, detail: String) -> NnError {
    NnError::Shape {
        op: op.into(),
        detail,
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; receives no gradient outside the tape.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Read a parameter. Repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&n) = self.params.get(&key) {
            return Var(n);
        }
        let v = self.push(store.get(id).clone(), Op::Param { store: key.0, id: key.1 });
        self.params.insert(key, v.0);
        v
    }

    fn binary(&mut self, op: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var, NnError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, x, y)?;
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let t = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        Ok(self.push(t, mk))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, mk: Op) -> Var {
        let t = self.nodes[a.0].value.map(f);
        self.push(t, mk)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a.0, b.0))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a.0, b.0))
    }

    fn row_check(&self, op: &str, a: Var, row: Var) -> Result<(), NnError> {
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if r.rows != 1 || r.cols != x.cols {
            return Err(shape_err(op, format!("row {:?} against {:?}", r.shape(), x.shape())));
        }
        Ok(())
    }

    /// `a + row` with `row` of shape 1×cols broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_check("add_row", a, row)?;
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let mut t = x.clone();
        for chunk in t.data.chunks_mut(x.cols) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        Ok(self.push(t, Op::AddRow(a.0, row.0)))
    }

    /// `a ⊙ row` with `row` of shape 1×cols broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_check("mul_row", a, row)?;
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let mut t = x.clone();
        for chunk in t.data.chunks_mut(x.cols) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v *= b;
            }
        }
        Ok(self.push(t, Op::MulRow(a.0, row.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v + c, Op::AddScalar(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.cols != y.rows {
            return Err(shape_err("matmul", format!("{:?} · {:?}", x.shape(), y.shape())));
        }
        let t = x.matmul(y);
        Ok(self.push(t, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.transpose();
        self.push(t, Op::Transpose(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    /// Natural log with the argument floored at [`LN_FLOOR`].
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(LN_FLOOR).ln(), Op::Ln(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut t = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            softmax_row(x.row(r), &mut t.data[r * x.cols..(r + 1) * x.cols]);
        }
        self.push(t, Op::Softmax(a.0))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut t = x.clone();
        for chunk in t.data.chunks_mut(x.cols.max(1)) {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + chunk.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            chunk.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(t, Op::LogSoftmax(a.0))
    }

    /// Row-wise standardization (biased variance), no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let mut t = x.clone();
        for chunk in t.data.chunks_mut(x.cols.max(1)) {
            let (mean, inv) = row_stats(chunk, eps);
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        self.push(t, Op::LayerNorm(a.0, eps))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = parts.first().map_or(0, |p| self.nodes[p.0].value.rows);
        if parts.iter().any(|p| self.nodes[p.0].value.rows != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let t = Tensor { rows, cols, data };
        Ok(self.push(t, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = parts.first().map_or(0, |p| self.nodes[p.0].value.cols);
        if parts.iter().any(|p| self.nodes[p.0].value.cols != cols) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let rows = data.len() / cols.max(1);
        let t = Tensor { rows, cols, data };
        Ok(self.push(t, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        if start + len > x.cols {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {}", x.cols)));
        }
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let t = Tensor {
            rows: x.rows,
            cols: len,
            data,
        };
        Ok(self.push(t, Op::SliceCols(a.0, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        if start + len > x.rows {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {}", x.rows)));
        }
        let t = Tensor {
            rows: len,
            cols: x.cols,
            data: x.data[start * x.cols..(start + len) * x.cols].to_vec(),
        };
        Ok(self.push(t, Op::SliceRows(a.0, start)))
    }

    /// Rows `idx[0], idx[1], …` of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        if let Some(bad) = idx.iter().find(|&&i| i >= x.rows) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", x.rows)));
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols);
        for &i in &idx {
            data.extend_from_slice(x.row(i));
        }
        let t = Tensor {
            rows: idx.len(),
            cols: x.cols,
            data,
        };
        Ok(self.push(t, Op::GatherRows(a.0, idx)))
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        if rows * cols != x.len() {
            return Err(shape_err("reshape", format!("{:?} -> ({rows}, {cols})", x.shape())));
        }
        let t = Tensor {
            rows,
            cols,
            data: x.data.clone(),
        };
        Ok(self.push(t, Op::Reshape(a.0)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(t, Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let t = Tensor::scalar(x.sum() / x.len().max(1) as f64);
        self.push(t, Op::Mean(a.0))
    }

    /// Mean over rows → 1×cols.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut t = Tensor::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in t.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows.max(1) as f64;
        t.data.iter_mut().for_each(|v| *v /= n);
        self.push(t, Op::MeanRows(a.0))
    }

    /// Sum over columns → rows×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let t = Tensor::column((0..x.rows).map(|r| x.row(r).iter().sum()).collect());
        self.push(t, Op::SumCols(a.0))
    }

    /// Mean of each run of `group` consecutive rows → (rows/group)×cols.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        if group == 0 || !x.rows.is_multiple_of(group) {
            return Err(shape_err("mean_groups", format!("{} rows in groups of {group}", x.rows)));
        }
        let g = x.rows / group;
        let mut t = Tensor::zeros(g, x.cols);
        for r in 0..x.rows {
            let o = r / group;
            for c in 0..x.cols {
                t.data[o * x.cols + c] += x.data[r * x.cols + c] / group as f64;
            }
        }
        Ok(self.push(t, Op::MeanGroups(a.0, group)))
    }

    /// Row `g` of the output is the mean of rows `groups[g]` of `a`.
    pub fn gather_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        let mut t = Tensor::zeros(groups.len(), x.cols);
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() || rows.iter().any(|&r| r >= x.rows) {
                return Err(shape_err("gather_mean", format!("group {g} is empty or out of {} rows", x.rows)));
            }
            let w = 1.0 / rows.len() as f64;
            for &r in rows {
                for c in 0..x.cols {
                    t.data[g * x.cols + c] += w * x.data[r * x.cols + c];
                }
            }
        }
        Ok(self.push(t, Op::GatherMean(a.0, groups)))
    }

    /// `a[r, idx[r]]` for every row → rows×1.
    pub fn pick_per_row(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, NnError> {
        let x = &self.nodes[a.0].value;
        if idx.len() != x.rows || idx.iter().any(|&i| i >= x.cols) {
            return Err(shape_err("pick_per_row", format!("{} indices into {:?}", idx.len(), x.shape())));
        }
        let t = Tensor::column(idx.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect());
        Ok(self.push(t, Op::PickPerRow(a.0, idx)))
    }

    /// For each block of `n` rows: `A_b · B_bᵀ`. Inputs (G·n)×d → (G·n)×n.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, n: usize) -> Result<Var, NnError> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("block_matmul_nt", x, y)?;
        if n == 0 || x.rows % n != 0 {
            return Err(shape_err("block_matmul_nt", format!("{} rows in blocks of {n}", x.rows)));
        }
        let d = x.cols;
        let mut t = Tensor::zeros(x.rows, n);
        for g in 0..x.rows / n {
            for i in 0..n {
                let ar = &x.data[(g * n + i) * d..(g * n + i + 1) * d];
                for j in 0..n {
                    let br = &y.data[(g * n + j) * d..(g * n + j + 1) * d];
                    t.data[(g * n + i) * n + j] = ar.iter().zip(br).map(|(p, q)| p * q).sum();
                }
            }
        }
        Ok(self.push(t, Op::BlockMatMulNT(a.0, b.0, n)))
    }

    /// For each block of `n` rows: `P_b · V_b`. P is (G·n)×n, V is (G·n)×d.
    pub fn block_matmul(&mut self, p: Var, v: Var, n: usize) -> Result<Var, NnError> {
        let (x, y) = (&self.nodes[p.0].value, &self.nodes[v.0].value);
        if x.cols != n || x.rows != y.rows || n == 0 || x.rows % n != 0 {
            return Err(shape_err("block_matmul", format!("{:?} · {:?} in blocks of {n}", x.shape(), y.shape())));
        }
        let d = y.cols;
        let mut t = Tensor::zeros(x.rows, d);
        for g in 0..x.rows / n {
            for i in 0..n {
                for j in 0..n {
                    let w = x.data[(g * n + i) * n + j];
                    let vr = &y.data[(g * n + j) * d..(g * n + j + 1) * d];
                    let orow = &mut t.data[(g * n + i) * d..(g * n + i + 1) * d];
                    for (o, q) in orow.iter_mut().zip(vr) {
                        *o += w * q;
                    }
                }
            }
        }
        Ok(self.push(t, Op::BlockMatMul(p.0, v.0, n)))
    }

    /// Joint log-probability of each row's ordered selection under
    /// sequential sampling without replacement from that row's
    /// probabilities: Σ_j [ln p_{s_j} − ln(1 − Σ_{l<j} p_{s_l})]. → rows×1.
    pub fn plackett_luce_logprob(&mut self, probs: Var, ids: Vec<Vec<usize>>) -> Result<Var, NnError> {
        let x = &self.nodes[probs.0].value;
        if ids.len() != x.rows {
            return Err(shape_err("plackett_luce", format!("{} selections for {} rows", ids.len(), x.rows)));
        }
        let mut out = Vec::with_capacity(x.rows);
        for (r, sel) in ids.iter().enumerate() {
            if sel.iter().any(|&s| s >= x.cols) {
                return Err(shape_err("plackett_luce", format!("index out of {} columns", x.cols)));
            }
            out.push(plackett_luce(x.row(r), sel));
        }
        Ok(self.push(Tensor::column(out), Op::PlackettLuce(probs.0, ids)))
    }

    /// Gradients of the scalar `loss` with respect to every parameter read
    /// on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NnError::NotScalar(lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], i: usize, t: Tensor) {
            match &mut grads[i] {
                Some(g) => g.add_assign(&t),
                slot => *slot = Some(t),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let y = &self.nodes[i].value;
            let val = |j: usize| &self.nodes[j].value;
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param { store, id } => out.accumulate(*store, *id, g),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, val(*b), |g, q| g * q);
                    let gb = zip(&g, val(*a), |g, p| g * p);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Minimum(a, b) => {
                    let (x, z) = (val(*a), val(*b));
                    let mut ga = g.clone();
                    let mut gb = g;
                    for k in 0..ga.data.len() {
                        if x.data[k] <= z.data[k] {
                            gb.data[k] = 0.0;
                        } else {
                            ga.data[k] = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for chunk in g.data.chunks(g.cols) {
                        for (o, v) in gr.data.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let (x, rv) = (val(*a), val(*r));
                    let mut gr = Tensor::zeros(1, g.cols);
                    let mut ga = g.clone();
                    for row in 0..g.rows {
                        for c in 0..g.cols {
                            let k = row * g.cols + c;
                            gr.data[c] += g.data[k] * x.data[k];
                            ga.data[k] = g.data[k] * rv.data[c];
                        }
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(val(*b));
                    let gb = val(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&g, y, |g, s| g * s * (1.0 - s))),
                Op::Relu(a) => acc(&mut grads, *a, zip(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
                Op::Tanh(a) => acc(&mut grads, *a, zip(&g, y, |g, t| g * (1.0 - t * t))),
                Op::Exp(a) => acc(&mut grads, *a, zip(&g, y, |g, e| g * e)),
                Op::Ln(a) => acc(&mut grads, *a, zip(&g, val(*a), |g, x| g / x.max(LN_FLOOR))),
                Op::Square(a) => acc(&mut grads, *a, zip(&g, val(*a), |g, x| 2.0 * g * x)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(&mut grads, *a, zip(&g, val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }));
                }
                Op::Softmax(a) => {
                    let mut gx = g.clone();
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for c in 0..g.cols {
                            gx.data[r * g.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LogSoftmax(a) => {
                    let mut gx = g.clone();
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let s: f64 = gr.iter().sum();
                        for c in 0..g.cols {
                            gx.data[r * g.cols + c] = gr[c] - yr[c].exp() * s;
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LayerNorm(a, eps) => {
                    let x = val(*a);
                    let n = x.cols as f64;
                    let mut gx = g.clone();
                    for r in 0..g.rows {
                        let (_, inv) = row_stats(x.row(r), *eps);
                        let (gr, yr) = (g.row(r), y.row(r));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for c in 0..g.cols {
                            gx.data[r * g.cols + c] = inv * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).cols;
                        let mut gp = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (h, w) = val(*p).shape();
                        let gp = Tensor {
                            rows: h,
                            cols: w,
                            data: g.data[off * w..(off + h) * w].to_vec(),
                        };
                        off += h;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = val(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..g.rows {
                        gx.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::SliceRows(a, start) => {
                    let x = val(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    gx.data[start * x.cols..(start + g.rows) * x.cols].copy_from_slice(&g.data);
                    acc(&mut grads, *a, gx);
                }
                Op::GatherRows(a, idx) => {
                    let x = val(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..x.cols {
                            gx.data[i * x.cols + c] += g.data[k * x.cols + c];
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Reshape(a) => {
                    let x = val(*a);
                    acc(
                        &mut grads,
                        *a,
                        Tensor {
                            rows: x.rows,
                            cols: x.cols,
                            data: g.data,
                        },
                    );
                }
                Op::Sum(a) => {
                    let x = val(*a);
                    acc(&mut grads, *a, Tensor::full(x.rows, x.cols, g.item()));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    acc(&mut grads, *a, Tensor::full(x.rows, x.cols, g.item() / x.len().max(1) as f64));
                }
                Op::MeanRows(a) => {
                    let x = val(*a);
                    let n = x.rows.max(1) as f64;
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            gx.data[r * x.cols + c] = g.data[c] / n;
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::SumCols(a) => {
                    let x = val(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            gx.data[r * x.cols + c] = g.data[r];
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::MeanGroups(a, group) => {
                    let x = val(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for c in 0..x.cols {
                            gx.data[r * x.cols + c] = g.data[(r / group) * x.cols + c] / *group as f64;
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::GatherMean(a, groups) => {
                    let x = val(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for (gi, rows) in groups.iter().enumerate() {
                        let w = 1.0 / rows.len() as f64;
                        for &r in rows {
                            for c in 0..x.cols {
                                gx.data[r * x.cols + c] += w * g.data[gi * x.cols + c];
                            }
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::PickPerRow(a, idx) => {
                    let x = val(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for (r, &c) in idx.iter().enumerate() {
                        gx.data[r * x.cols + c] = g.data[r];
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::BlockMatMulNT(a, b, n) => {
                    let (x, z, n) = (val(*a), val(*b), *n);
                    let d = x.cols;
                    let mut ga = Tensor::zeros(x.rows, d);
                    let mut gb = Tensor::zeros(x.rows, d);
                    for blk in 0..x.rows / n {
                        for i in 0..n {
                            let ri = blk * n + i;
                            for j in 0..n {
                                let rj = blk * n + j;
                                let w = g.data[ri * n + j];
                                if w == 0.0 {
                                    continue;
                                }
                                for k in 0..d {
                                    ga.data[ri * d + k] += w * z.data[rj * d + k];
                                    gb.data[rj * d + k] += w * x.data[ri * d + k];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::BlockMatMul(p, v, n) => {
                    let (x, z, n) = (val(*p), val(*v), *n);
                    let d = z.cols;
                    let mut gp = Tensor::zeros(x.rows, n);
                    let mut gv = Tensor::zeros(z.rows, d);
                    for blk in 0..x.rows / n {
                        for i in 0..n {
                            let ri = blk * n + i;
                            let grow = &g.data[ri * d..(ri + 1) * d];
                            for j in 0..n {
                                let rj = blk * n + j;
                                let vrow = &z.data[rj * d..(rj + 1) * d];
                                gp.data[ri * n + j] = grow.iter().zip(vrow).map(|(p, q)| p * q).sum();
                                let w = x.data[ri * n + j];
                                for k in 0..d {
                                    gv.data[rj * d + k] += w * grow[k];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *v, gv);
                }
                Op::PlackettLuce(a, ids) => {
                    let x = val(*a);
                    let mut gx = Tensor::zeros(x.rows, x.cols);
                    for (r, sel) in ids.iter().enumerate() {
                        let gr = g.data[r];
                        let row = x.row(r);
                        let mut taken = 0.0;
                        for (j, &s) in sel.iter().enumerate() {
                            gx.data[r * x.cols + s] += gr / row[s].max(LN_FLOOR);
                            let rem = 1.0 - taken;
                            if rem > LN_FLOOR {
                                for &l in &sel[..j] {
                                    gx.data[r * x.cols + l] += gr / rem;
                                }
                            }
                            taken += row[s];
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
            }
        }
        Ok(out)
    }
}

fn zip(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: g.rows,
        cols: g.cols,
        data: g.data.iter().zip(&x.data).map(|(a, b)| f(*a, *b)).collect(),
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len().max(1) as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-probability of the ordered selection `sel` drawn without replacement
/// from `probs`.
pub fn plackett_luce(probs: &[f64], sel: &[usize]) -> f64 {
    let mut taken = 0.0_f64;
    let mut lp = 0.0;
    for &s in sel {
        lp += probs[s].max(LN_FLOOR).ln() - (1.0 - taken).max(LN_FLOOR).ln();
        taken += probs[s];
    }
    lp
}
