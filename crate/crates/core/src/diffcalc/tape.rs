//! Define-by-run recording of primitive operations and their reverse pass.
//!
//! Every forward method validates shapes, computes the value eagerly, rejects
//! non-finite results and appends a node. Node ids are handed out in creation
//! order, so the node list is always topologically sorted.

use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    Submatrix(Var, Vec<usize>, Vec<usize>),
    Reshape(Var),
    Log1pSumExp(Var),
    RowL2Normalize(Var, Vec<f64>),
    RowSumNormalize(Var, Vec<Option<f64>>, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode recording tape. One tape per episode evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    branches: Vec<bool>,
}

/// Rows whose raw edge sum falls below this magnitude are guarded.
pub const ROW_SUM_GUARD: f64 = 1e-8;
const L2_EPS: f64 = 1e-12;

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Boolean record of every piecewise branch taken (relu sign per element,
    /// guard activation per normalized row). Two evaluations with equal
    /// patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> &[bool] {
        &self.branches
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::dim(op, format!("expected at most 2 dims, got {:?}", self.value(v).shape())))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims("matmul", a)?;
        let (k2, n) = self.dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims("transpose", a)?;
        let out = transpose_data(self.value(a).data(), m, n);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push("add", t, Op::Add(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m x n` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims("add_bias", x)?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::dim("add_bias", format!("bias of {} for {n} columns", b.len())));
        }
        let bd = b.data().to_vec();
        let xv = self.value(x);
        let out = xv
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(&bd).map(|(p, q)| p + q))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("add_bias", t, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect())?;
        self.push("scale", t, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push("mul", t, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, t, op)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let signs: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
        self.branches.extend(signs);
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// Softmax along the last axis (each row of a matrix).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims("softmax", x)?;
        if n == 0 {
            return Err(Error::dim("softmax", "empty rows"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&xv.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n], None);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", t, Op::SoftmaxRows(x))
    }

    /// Row softmax restricted to entries where `mask` is true. Masked entries
    /// are exactly zero; a row with no unmasked entry is all zeros.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (m, n) = self.dims("masked_softmax", x)?;
        if mask.len() != m * n {
            return Err(Error::dim("masked_softmax", format!("mask of {} for {m}x{n}", mask.len())));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let r = i * n..(i + 1) * n;
            softmax_into(&xv.data()[r.clone()], &mut out[r.clone()], Some(&mask[r]));
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("masked_softmax", t, Op::MaskedSoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(0.0, |acc, v| acc + v);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::dim("mean", "empty input"));
        }
        let s = xv.data().iter().fold(0.0, |acc, v| acc + v) / xv.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Column-wise mean of an `m x n` matrix, giving a length-`n` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims("mean_rows", x)?;
        if m == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&xv[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(x))
    }

    /// Stacks inputs vertically. Vectors count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no inputs"));
        }
        let n = self.dims("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims("concat_rows", p)?;
            if c != n {
                return Err(Error::dim("concat_rows", format!("column count {c} vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", Tensor::matrix(rows, n, out)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins inputs horizontally.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no inputs"));
        }
        let m = self.dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims("concat_cols", p)?;
            if r != m {
                return Err(Error::dim("concat_cols", format!("row count {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Picks rows of a matrix by index (embedding lookup, reordering).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims("gather_rows", x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {m}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        let t = Tensor::matrix(index.len(), n, out)?;
        self.push("gather_rows", t, Op::GatherRows(x, index.to_vec()))
    }

    /// Picks arbitrary flat (row-major) entries into a vector. An empty
    /// selection yields an empty vector.
    pub fn select(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = flat.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::dim("select", format!("entry {bad} of {}", xv.len())));
        }
        let out = flat.iter().map(|&i| xv[i]).collect();
        self.push("select", Tensor::vector(out), Op::Select(x, flat.to_vec()))
    }

    pub fn submatrix(&mut self, x: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let (m, n) = self.dims("submatrix", x)?;
        if rows.iter().any(|&r| r >= m) || cols.iter().any(|&c| c >= n) {
            return Err(Error::dim("submatrix", format!("index outside {m}x{n}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            for &c in cols {
                out.push(xv[r * n + c]);
            }
        }
        let t = Tensor::matrix(rows.len(), cols.len(), out)?;
        self.push("submatrix", t, Op::Submatrix(x, rows.to_vec(), cols.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        let t = Tensor::new(shape.to_vec(), data).map_err(|_| {
            Error::dim("reshape", format!("{:?} to {shape:?}", self.value(x).shape()))
        })?;
        self.push("reshape", t, Op::Reshape(x))
    }

    /// `log(1 + sum_i exp(x_i))` over every entry, evaluated as a
    /// log-sum-exp over `{0} ∪ x`. The empty input gives exactly 0.
    pub fn log1p_sum_exp(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).data();
        check_finite("log1p_sum_exp", xv)?;
        let out = log1p_sum_exp(xv);
        self.push("log1p_sum_exp", Tensor::scalar(out), Op::Log1pSumExp(x))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims("row_l2_normalize", x)?;
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(m);
        let mut out = xv.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = row.iter().fold(0.0, |a, v| a + v * v).sqrt().max(L2_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("row_l2_normalize", t, Op::RowL2Normalize(x, norms))
    }

    /// Divides each row by its own sum. Rows that are entirely zero map to
    /// zero; rows whose sum has magnitude below [`ROW_SUM_GUARD`] are divided
    /// by the guard (carrying the sum's sign) instead.
    pub fn row_sum_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims("row_sum_normalize", x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut denoms = Vec::with_capacity(m);
        let mut guarded = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            if row.iter().all(|&v| v == 0.0) {
                denoms.push(None);
                guarded.push(false);
                continue;
            }
            let s = row.iter().fold(0.0, |a, v| a + v);
            let g = s.abs() < ROW_SUM_GUARD;
            let d = if g {
                log::warn!("row_sum_normalize: row {i} sum {s:e} below guard; using guarded denominator");
                ROW_SUM_GUARD.copysign(s)
            } else {
                s
            };
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / d;
            }
            denoms.push(Some(d));
            guarded.push(g);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.branches.extend(guarded.iter().copied());
        self.push("row_sum_normalize", t, Op::RowSumNormalize(x, denoms, guarded))
    }

    /// Reverse pass from a scalar `loss`, accumulating `d loss / d param`
    /// into each reachable parameter's gradient. The tape is left intact, so
    /// calling this twice doubles the accumulated gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let grads = self.gradients(loss);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads[i]) {
                let acc = store.get_mut(*pid).grad.data_mut();
                if acc.len() != g.len() {
                    return Err(Error::dim("backward", "parameter changed shape during recording"));
                }
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every node (None when unreachable).
    pub fn gradients(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0; self.value(loss).len()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = slot(grads, *a, m * k);
                for r in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for c in 0..n {
                            s += g[r * n + c] * bv[p * n + c];
                        }
                        ga[r * k + p] += s;
                    }
                }
                let gb = slot(grads, *b, k * n);
                for r in 0..m {
                    for p in 0..k {
                        let x = av[r * k + p];
                        for c in 0..n {
                            gb[p * n + c] += x * g[r * n + c];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let gt = transpose_data(g, n, m);
                add_into(slot(grads, *a, m * n), &gt);
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::AddBias(x, b) => {
                add_into(slot(grads, *x, g.len()), g);
                let n = self.value(*b).len();
                let gb = slot(grads, *b, n);
                for row in g.chunks(n.max(1)) {
                    add_into(gb, row);
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += c * v;
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = slot(grads, *a, g.len());
                for ((o, v), q) in ga.iter_mut().zip(g).zip(bv) {
                    *o += v * q;
                }
                let gb = slot(grads, *b, g.len());
                for ((o, v), p) in gb.iter_mut().zip(g).zip(av) {
                    *o += v * p;
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, g.len());
                for ((o, v), t) in gx.iter_mut().zip(g).zip(y) {
                    *o += v * (1.0 - t * t);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((o, v), inp) in gx.iter_mut().zip(g).zip(xv) {
                    if *inp > 0.0 {
                        *o += v;
                    }
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, *x, g.len());
                for ((o, v), e) in gx.iter_mut().zip(g).zip(y) {
                    *o += v * e;
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for ((o, v), inp) in gx.iter_mut().zip(g).zip(xv) {
                    *o += v / inp;
                }
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.cols();
                let gx = slot(grads, *x, g.len());
                softmax_backward(y, g, gx, n);
            }
            Op::MaskedSoftmaxRows(x) => {
                // masked outputs are exactly zero, so they drop out of the dot product
                let n = node.value.cols();
                let gx = slot(grads, *x, g.len());
                softmax_backward(y, g, gx, n);
            }
            Op::SumAll(x) => {
                let len = self.value(*x).len();
                slot(grads, *x, len).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::MeanAll(x) => {
                let len = self.value(*x).len();
                let share = g[0] / len as f64;
                slot(grads, *x, len).iter_mut().for_each(|o| *o += share);
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let gx = slot(grads, *x, m * n);
                for r in 0..m {
                    for c in 0..n {
                        gx[r * n + c] += g[c] / m as f64;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    add_into(slot(grads, *p, len), &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2().unwrap();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let gp = slot(grads, *p, m * w);
                    for r in 0..m {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + off..r * n + off + w]);
                    }
                    off += w;
                }
            }
            Op::GatherRows(x, index) => {
                let n = self.value(*x).cols();
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                for (r, &src) in index.iter().enumerate() {
                    add_into(&mut gx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::Select(x, flat) => {
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                for (&src, v) in flat.iter().zip(g) {
                    gx[src] += v;
                }
            }
            Op::Submatrix(x, rows, cols) => {
                let n = self.value(*x).cols();
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                let w = cols.len();
                for (a, &r) in rows.iter().enumerate() {
                    for (b, &c) in cols.iter().enumerate() {
                        gx[r * n + c] += g[a * w + b];
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Log1pSumExp(x) => {
                let xv = self.value(*x).data();
                let out = y[0];
                let gx = slot(grads, *x, xv.len());
                for (o, v) in gx.iter_mut().zip(xv) {
                    *o += g[0] * (v - out).exp();
                }
            }
            Op::RowL2Normalize(x, norms) => {
                let n = node.value.cols();
                let gx = slot(grads, *x, g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    if norm <= L2_EPS {
                        for (o, v) in gx[r * n..(r + 1) * n].iter_mut().zip(gr) {
                            *o += v / L2_EPS;
                        }
                        continue;
                    }
                    let dot = yr.iter().zip(gr).fold(0.0, |a, (p, q)| a + p * q);
                    for ((o, v), yy) in gx[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                        *o += (v - yy * dot) / norm;
                    }
                }
            }
            Op::RowSumNormalize(x, denoms, guarded) => {
                let n = node.value.cols();
                let gx = slot(grads, *x, g.len());
                for (r, (d, &gd)) in denoms.iter().zip(guarded).enumerate() {
                    let Some(d) = *d else { continue };
                    let gr = &g[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    // y = x / s  =>  dx_j = (g_j - sum_k g_k y_k) / s
                    let dot = if gd {
                        0.0
                    } else {
                        yr.iter().zip(gr).fold(0.0, |a, (p, q)| a + p * q)
                    };
                    for (o, v) in gx[r * n..(r + 1) * n].iter_mut().zip(gr) {
                        *o += (v - dot) / d;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_data(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

fn softmax_into(x: &[f64], out: &mut [f64], mask: Option<&[bool]>) {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..x.len())
        .filter(|&j| on(j))
        .map(|j| x[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for j in 0..x.len() {
        out[j] = if on(j) { (x[j] - max).exp() } else { 0.0 };
        total += out[j];
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn softmax_backward(y: &[f64], g: &[f64], gx: &mut [f64], n: usize) {
    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
        let dot = yr.iter().zip(gr).fold(0.0, |a, (p, q)| a + p * q);
        for ((o, yy), v) in gxr.iter_mut().zip(yr).zip(gr) {
            *o += yy * (v - dot);
        }
    }
}

/// `log(1 + Σ exp(v))`, computed without overflow. Empty input gives 0.
pub fn log1p_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(0.0, f64::max);
    let s = values.iter().fold((-m).exp(), |acc, v| acc + (v - m).exp());
    m + s.ln()
}
