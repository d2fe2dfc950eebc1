//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op as a node. Parameter leaves refer back
//! to the [`ParamStore`] the graph borrows, so building a graph never copies
//! weights. [`Graph::backward`] replays the tape in reverse and adds parameter
//! gradients into a [`Gradients`] buffer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, axis_extents, Real, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training mode; dropout masks are drawn from a generator seeded with this value.
    Train { seed: u64 },
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Real),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { input: Var, mask: Vec<Real> },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Sum(Var),
    MeanRows(Var),
    Pick { input: Var, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    rng: Option<ChaCha8Rng>,
}

/// Gradients of the free (non-parameter) leaves created with [`Graph::variable`].
#[derive(Debug, Default)]
pub struct LeafGrads {
    grads: Vec<(Var, Tensor)>,
}

impl LeafGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(w, _)| *w == v).map(|(_, t)| t)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Graph {
            params,
            nodes: Vec::new(),
            rng,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable parameter leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient but is not stored in the parameter set.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf outside the gradient graph.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        tensor::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(TensorError::Unsupported {
                op: "transpose",
                detail: format!("expected a matrix, got shape {:?}", ta.shape()),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector (length = last dimension) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.len() != n {
            return Err(mismatch("add_row", ta, tb));
        }
        let b = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    /// `a · W + b` for `W: [in × out]`, `b: [out]`.
    pub fn affine(&mut self, a: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let h = self.matmul(a, weight)?;
        self.add_row(h, bias)
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: Real) -> Var {
        self.map_unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, tensor::sigmoid, Op::Sigmoid(a))
    }

    /// `log σ(a)`, stable for large |a|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, tensor::log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, Real::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_unary(a, Real::ln, Op::Log(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.softmax_values("softmax", a, axis, false)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax { input: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.softmax_values("log_softmax", a, axis, true)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::LogSoftmax { input: a, axis }, rg))
    }

    fn softmax_values(
        &self,
        op: &'static str,
        a: Var,
        axis: usize,
        log: bool,
    ) -> Result<Tensor, TensorError> {
        let ta = self.value(a);
        let (outer, len, inner) = axis_extents(op, ta.shape(), axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op });
        }
        let src = ta.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(Real::NEG_INFINITY, Real::max);
                let total: Real = (0..len).map(|k| (src[idx(k)] - max).exp()).sum();
                let log_total = total.ln();
                for k in 0..len {
                    let shifted = src[idx(k)] - max;
                    out[idx(k)] = if log {
                        shifted - log_total
                    } else {
                        shifted.exp() / total
                    };
                }
            }
        }
        Tensor::new(ta.shape().to_vec(), out)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyAxis { op: "concat" })?;
        let base = self.value(first).shape().to_vec();
        let (outer, _, inner) = axis_extents("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let tp = self.value(p);
            let s = tp.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", self.value(first), tp));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let tp = self.value(p);
                let chunk = tp.shape()[axis] * inner;
                out.extend_from_slice(&tp.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (outer, len, inner) = axis_extents("slice", ta.shape(), axis)?;
        if start >= end || end > len {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: end.max(start),
                len,
            });
        }
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + width * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = width;
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Gathers rows of `table` (`[vocab × d]`) for each id, giving `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(TensorError::Unsupported {
                op: "embedding",
                detail: format!("table must be a matrix, got {:?}", tt.shape()),
            });
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        if ids.is_empty() {
            return Err(TensorError::EmptyAxis { op: "embedding" });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(tt.row_slice(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: Real) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate as f64));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(a);
        };
        let n = match &self.nodes[a.0].value {
            Value::Owned(t) => t.len(),
            Value::Param(id) => self.params.get(*id).len(),
        };
        let keep = 1.0 - rate;
        let mask: Vec<Real> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep as f64 {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Dropout { input: a, mask }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        const EPS: Real = 1e-5;
        let ta = self.value(a);
        let n = ta.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != n || tb.len() != n {
            return Err(mismatch("layer_norm", ta, tg));
        }
        let (g, b) = (tg.data(), tb.data());
        let rows = ta.len() / n;
        let mut normalized = Vec::with_capacity(ta.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / n as Real;
            let r = 1.0 / (var + EPS).sqrt();
            inv_std.push(r);
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Column means of an `[m × n]` matrix, as `[1 × n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(TensorError::Unsupported {
                op: "mean_rows",
                detail: format!("expected a matrix, got {:?}", ta.shape()),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as Real;
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a), rg))
    }

    /// The entry at flat `index`, as a `[1]` tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let v = *ta.data().get(index).ok_or(TensorError::IndexOutOfRange {
            op: "pick",
            index,
            len: ta.len(),
        })?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::Pick { input: a, index }, rg))
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    ///
    /// Parameter gradients are added into `grads`; gradients of free leaves are returned.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<LeafGrads, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaves = LeafGrads::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let y = self.value(Var(idx));
            match &node.op {
                Op::Leaf => match &node.value {
                    Value::Param(id) => grads.accumulate(*id, &g),
                    Value::Owned(t) => leaves
                        .grads
                        .push((Var(idx), Tensor::new(t.shape().to_vec(), g)?)),
                },
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.requires_grad(*a) {
                        let buf = slot(&mut adj, *a, ta.len());
                        tensor::matmul_nt_acc(&g, tb.data(), buf, m, n, k);
                    }
                    if self.requires_grad(*b) {
                        let buf = slot(&mut adj, *b, tb.len());
                        tensor::matmul_tn_acc(ta.data(), &g, buf, m, k, n);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (y.shape()[1], y.shape()[0]);
                    let buf = slot(&mut adj, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign: Real = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.requires_grad(*a) {
                        add_into(slot(&mut adj, *a, g.len()), &g, 1.0);
                    }
                    if self.requires_grad(*b) {
                        add_into(slot(&mut adj, *b, g.len()), &g, sign);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let tb = self.value(*b).data();
                        let buf = slot(&mut adj, *a, g.len());
                        for ((o, gv), bv) in buf.iter_mut().zip(&g).zip(tb) {
                            *o += gv * bv;
                        }
                    }
                    if self.requires_grad(*b) {
                        let ta = self.value(*a).data();
                        let buf = slot(&mut adj, *b, g.len());
                        for ((o, gv), av) in buf.iter_mut().zip(&g).zip(ta) {
                            *o += gv * av;
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.requires_grad(*a) {
                        add_into(slot(&mut adj, *a, g.len()), &g, 1.0);
                    }
                    if self.requires_grad(*bias) {
                        let n = self.value(*bias).len();
                        let buf = slot(&mut adj, *bias, n);
                        for row in g.chunks(n) {
                            add_into(buf, row, 1.0);
                        }
                    }
                }
                Op::Scale(a, c) => add_into(slot(&mut adj, *a, g.len()), &g, *c),
                Op::Sigmoid(a) => {
                    let buf = slot(&mut adj, *a, g.len());
                    for ((o, gv), yv) in buf.iter_mut().zip(&g).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a).data();
                    let buf = slot(&mut adj, *a, g.len());
                    for ((o, gv), xv) in buf.iter_mut().zip(&g).zip(x) {
                        *o += gv * tensor::sigmoid(-xv);
                    }
                }
                Op::Tanh(a) => {
                    let buf = slot(&mut adj, *a, g.len());
                    for ((o, gv), yv) in buf.iter_mut().zip(&g).zip(y.data()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let buf = slot(&mut adj, *a, g.len());
                    for ((o, gv), xv) in buf.iter_mut().zip(&g).zip(x) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let buf = slot(&mut adj, *a, g.len());
                    for ((o, gv), xv) in buf.iter_mut().zip(&g).zip(x) {
                        *o += gv / xv;
                    }
                }
                Op::Softmax { input, axis } | Op::LogSoftmax { input, axis } => {
                    let log = matches!(node.op, Op::LogSoftmax { .. });
                    let (outer, len, inner) = axis_extents("softmax", y.shape(), *axis)?;
                    let yd = y.data();
                    let buf = slot(&mut adj, *input, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            if log {
                                let gsum: Real = (0..len).map(|k| g[idx(k)]).sum();
                                for k in 0..len {
                                    buf[idx(k)] += g[idx(k)] - yd[idx(k)].exp() * gsum;
                                }
                            } else {
                                let dot: Real = (0..len).map(|k| g[idx(k)] * yd[idx(k)]).sum();
                                for k in 0..len {
                                    buf[idx(k)] += yd[idx(k)] * (g[idx(k)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_extents("concat", y.shape(), *axis)?;
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).shape()[*axis];
                        if self.requires_grad(p) {
                            let buf = slot(&mut adj, p, outer * width * inner);
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * width * inner;
                                add_into(
                                    &mut buf[dst..dst + width * inner],
                                    &g[src..src + width * inner],
                                    1.0,
                                );
                            }
                        }
                        offset += width;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let src_shape = self.value(*input).shape().to_vec();
                    let (outer, len, inner) = axis_extents("slice", &src_shape, *axis)?;
                    let width = y.shape()[*axis];
                    let buf = slot(&mut adj, *input, outer * len * inner);
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        add_into(
                            &mut buf[dst..dst + width * inner],
                            &g[src..src + width * inner],
                            1.0,
                        );
                    }
                }
                Op::Reshape(a) => add_into(slot(&mut adj, *a, g.len()), &g, 1.0),
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let buf = slot(&mut adj, *table, tt.len());
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
                Op::Dropout { input, mask } => {
                    let buf = slot(&mut adj, *input, g.len());
                    for ((o, gv), m) in buf.iter_mut().zip(&g).zip(mask) {
                        *o += gv * m;
                    }
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let n = y.cols();
                    let gd = self.value(*gain).data().to_vec();
                    if self.requires_grad(*gain) {
                        let buf = slot(&mut adj, *gain, n);
                        for (grow, xrow) in g.chunks(n).zip(normalized.chunks(n)) {
                            for j in 0..n {
                                buf[j] += grow[j] * xrow[j];
                            }
                        }
                    }
                    if self.requires_grad(*bias) {
                        let buf = slot(&mut adj, *bias, n);
                        for grow in g.chunks(n) {
                            add_into(buf, grow, 1.0);
                        }
                    }
                    if self.requires_grad(*input) {
                        let buf = slot(&mut adj, *input, g.len());
                        for (r, (grow, xrow)) in g.chunks(n).zip(normalized.chunks(n)).enumerate() {
                            let dxh: Vec<Real> = (0..n).map(|j| grow[j] * gd[j]).collect();
                            let sum_dxh: Real = dxh.iter().sum();
                            let sum_dxh_xh: Real = dxh.iter().zip(xrow).map(|(a, b)| a * b).sum();
                            let scale = inv_std[r] / n as Real;
                            for j in 0..n {
                                buf[r * n + j] +=
                                    scale * (n as Real * dxh[j] - sum_dxh - xrow[j] * sum_dxh_xh);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let buf = slot(&mut adj, *a, n);
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::MeanRows(a) => {
                    let ta = self.value(*a);
                    let (m, n) = (ta.shape()[0], ta.shape()[1]);
                    let buf = slot(&mut adj, *a, m * n);
                    for row in buf.chunks_mut(n) {
                        for (o, gv) in row.iter_mut().zip(&g) {
                            *o += gv / m as Real;
                        }
                    }
                }
                Op::Pick { input, index } => {
                    let n = self.value(*input).len();
                    slot(&mut adj, *input, n)[*index] += g[0];
                }
            }
        }
        Ok(leaves)
    }
}

fn slot(adj: &mut [Option<Vec<Real>>], v: Var, len: usize) -> &mut Vec<Real> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [Real], src: &[Real], factor: Real) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn softmax_uniform_logits() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let a_data: Vec<Real> = (0..9).map(|v| v as Real * 0.5 - 1.0).collect();
        let i3 = g.constant(Tensor::identity(3));
        let a = g.constant(Tensor::matrix(3, 3, a_data.clone()).unwrap());
        let y = g.matmul(i3, a).unwrap();
        assert_eq!(g.value(y).data(), a_data.as_slice());
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.softmax(a, 2), Err(TensorError::AxisOutOfRange { .. })));
    }

    #[test]
    fn square_gradient() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.variable(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let mut grads = Gradients::for_store(&s);
        let leaves = g.backward(loss, &mut grads).unwrap();
        assert_eq!(leaves.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut s = store();
        let w = s.add_zeros("w", &[1]);
        let mut g = Graph::new(&s, Mode::Eval);
        let wv = g.param(w);
        let y = g.sigmoid(wv);
        let loss = g.sum(y);
        let mut grads = Gradients::for_store(&s);
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.25]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut s = store();
        let w = s.add("w", Tensor::scalar(2.0));
        let mut g = Graph::new(&s, Mode::Eval);
        let wv = g.param(w);
        let loss = g.scale(wv, 3.0);
        let mut grads = Gradients::for_store(&s);
        g.backward(loss, &mut grads).unwrap();
        g.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        let x = g.variable(Tensor::zeros(&[2]));
        let mut grads = Gradients::for_store(&s);
        assert_eq!(
            g.backward(x, &mut grads).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn dropout_identity_cases() {
        let s = store();
        let data = Tensor::row(vec![1.0, -2.0, 3.0, 4.0]);
        let mut eval = Graph::new(&s, Mode::Eval);
        let x = eval.constant(data.clone());
        let y = eval.dropout(x, 0.4).unwrap();
        assert_eq!(eval.value(y), &data);

        let mut train = Graph::new(&s, Mode::Train { seed: 1 });
        let x = train.constant(data.clone());
        let y = train.dropout(x, 0.0).unwrap();
        assert_eq!(train.value(y), &data);
        assert!(train.dropout(x, 1.0).is_err());
    }

    #[test]
    fn dropout_uses_inverted_scaling() {
        let s = store();
        let mut g = Graph::new(&s, Mode::Train { seed: 3 });
        let x = g.constant(Tensor::filled(&[1, 1000], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_softmax_axis_rejected() {
        // Zero-size tensors cannot be built, so the empty case surfaces at construction.
        assert!(Tensor::new(vec![1, 0], vec![]).is_err());
        let s = store();
        let mut g = Graph::new(&s, Mode::Eval);
        assert!(matches!(g.concat(&[], 0), Err(TensorError::EmptyAxis { .. })));
    }
}
