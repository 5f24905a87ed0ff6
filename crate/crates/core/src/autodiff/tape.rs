//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its value and the information
//! needed for its vector-Jacobian product. A tape is rebuilt per forward
//! pass; gradients for `requires_grad` leaves accumulate across repeated
//! [`Tape::backward`] calls until [`Tape::zero_grad`].

use super::tensor::{matmul_into, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row(usize),
    Col(usize),
}

impl Bcast {
    #[inline]
    fn idx(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row(c) => i % c,
            Bcast::Col(c) => i / c,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinKind, Var, Var, Bcast),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    MaxScalar(Var, f64),
    MinScalar(Var, f64),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumLast(Var),
    SumFirst(Var),
    SumAll(Var),
    L2NormLast(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.len() == 1 {
        return Ok(Bcast::Scalar);
    }
    if a.shape().len() == 2 {
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let bs = b.shape();
        if bs == [c] || bs == [1, c] {
            return Ok(Bcast::Row(c));
        }
        if bs == [r, 1] {
            return Ok(Bcast::Col(c));
        }
    }
    Err(shape_err(op, a, b))
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Value with the tape link cut: a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ---- elementwise binary ---------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = broadcast_kind(name, ta, tb)?;
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(da.len());
        match kind {
            BinKind::Add => out.extend(da.iter().enumerate().map(|(i, x)| x + db[bc.idx(i)])),
            BinKind::Sub => out.extend(da.iter().enumerate().map(|(i, x)| x - db[bc.idx(i)])),
            BinKind::Mul => out.extend(da.iter().enumerate().map(|(i, x)| x * db[bc.idx(i)])),
            BinKind::Div => {
                for (i, x) in da.iter().enumerate() {
                    let d = db[bc.idx(i)];
                    if d == 0.0 {
                        return Err(TensorError::DivisionByZero {
                            op: "div",
                            index: bc.idx(i),
                        });
                    }
                    out.push(x / d);
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Binary(kind, a, b, bc), rg))
    }

    /// `a + b`; `b` may broadcast as a scalar, a row `[c]`/`[1,c]` or a column `[r,1]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    /// Elementwise minimum of two same-shape tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("minimum", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x.min(*y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Minimum(a, b), rg))
    }

    // ---- elementwise unary ----------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let out = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, op, rg))
    }

    fn check_positive(&self, a: Var, op: &'static str) -> Result<()> {
        if let Some((index, &value)) = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0))
        {
            return Err(TensorError::NonPositive { op, value, index });
        }
        Ok(())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; rejects any nonpositive entry.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check_positive(a, "log")?;
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Square root; rejects any nonpositive entry.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check_positive(a, "sqrt")?;
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// `max(a, c)` elementwise.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::MaxScalar(a, c), |x| x.max(c))
    }

    /// `min(a, c)` elementwise.
    pub fn min_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::MinScalar(a, c), |x| x.min(c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.max_scalar(a, 0.0)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- linear algebra -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: 0,
                shape: ta.shape().to_vec(),
            });
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let d = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    // ---- softmax family -------------------------------------------------------

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        let d = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&d[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        let d = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    // ---- reductions -----------------------------------------------------------

    /// Sum over the last axis, keeping it with length 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        let out: Vec<f64> = ta.data().chunks(c).map(|row| row.iter().sum()).collect();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        debug_assert_eq!(out.len(), r);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SumLast(a), rg))
    }

    /// Sum over the first axis of a matrix, giving `[1, c]`.
    pub fn sum_first(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        let d = ta.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        let t = Tensor::new(vec![1, c], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SumFirst(a), rg))
    }

    /// Sum along `axis` of a matrix (0 = over rows, 1 = over columns), keeping dims.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            0 => self.sum_first(a),
            1 if self.shape(a).len() == 2 => self.sum_last(a),
            _ => Err(TensorError::BadAxis {
                op: "sum_axis",
                axis,
                shape: self.shape(a).to_vec(),
            }),
        }
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = match (axis, self.shape(a)) {
            (0, s) => s[0],
            (1, s) if s.len() == 2 => s[1],
            (_, s) => {
                return Err(TensorError::BadAxis {
                    op: "mean_axis",
                    axis,
                    shape: s.to_vec(),
                })
            }
        };
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let s: f64 = ta.data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm over the last axis, keeping it with length 1.
    pub fn l2_norm_last(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (_, c) = ta.rows_cols();
        let out: Vec<f64> = ta
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::L2NormLast(a), rg))
    }

    // ---- structural -----------------------------------------------------------

    /// Concatenate matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let t0 = &self.nodes[first.0].value;
        if t0.shape().len() != 2 || axis > 1 {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                shape: t0.shape().to_vec(),
            });
        }
        let (r0, c0) = (t0.shape()[0], t0.shape()[1]);
        for &p in &parts[1..] {
            let tp = &self.nodes[p.0].value;
            let ok = tp.shape().len() == 2
                && if axis == 0 {
                    tp.shape()[1] == c0
                } else {
                    tp.shape()[0] == r0
                };
            if !ok {
                return Err(shape_err("concat", t0, tp));
            }
        }
        let out_shape = if axis == 0 {
            vec![parts.iter().map(|p| self.shape(*p)[0]).sum(), c0]
        } else {
            vec![r0, parts.iter().map(|p| self.shape(*p)[1]).sum()]
        };
        let mut out = Vec::with_capacity(out_shape[0] * out_shape[1]);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.data());
            }
        } else {
            for i in 0..r0 {
                for &p in parts {
                    out.extend_from_slice(self.nodes[p.0].value.row(i));
                }
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (_, c) = ta.rows_cols();
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                len: c,
            });
        }
        let mut out = Vec::with_capacity(ta.len() / c * len);
        for row in ta.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Narrow(a, start, len), rg))
    }

    /// Rows of `a` selected by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let r = ta.shape()[0];
        let width = ta.len() / r;
        if idx.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            out.extend_from_slice(&ta.data()[i * width..(i + 1) * width]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// One entry per row: `out[i] = a[i, idx[i]]`, shape `[r, 1]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.rows_cols();
        if idx.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: ta.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    len: c,
                });
            }
            out.push(ta.data()[i * c + j]);
        }
        let t = Tensor::new(vec![r, 1], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Pick(a, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ---- reverse pass ---------------------------------------------------------

    /// Accumulate `d root / d leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = &self.nodes[root.0].value;
        if rt.len() != 1 {
            return Err(TensorError::NonScalarRoot(rt.shape().to_vec()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.nodes[id]
                    .grad
                    .get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, x) in slot.iter_mut().zip(&g) {
                    *s += x;
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[id].value.data();
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let (a, b, bc, kind) = (*a, *b, *bc, *kind);
                let (da, db) = (self.val(a), self.val(b));
                send(a, &|s| match kind {
                    BinKind::Add | BinKind::Sub => s.iter_mut().zip(g).for_each(|(s, g)| *s += g),
                    BinKind::Mul => {
                        for (i, s) in s.iter_mut().enumerate() {
                            *s += g[i] * db[bc.idx(i)];
                        }
                    }
                    BinKind::Div => {
                        for (i, s) in s.iter_mut().enumerate() {
                            *s += g[i] / db[bc.idx(i)];
                        }
                    }
                });
                send(b, &|s| {
                    for i in 0..g.len() {
                        let j = bc.idx(i);
                        s[j] += match kind {
                            BinKind::Add => g[i],
                            BinKind::Sub => -g[i],
                            BinKind::Mul => g[i] * da[i],
                            BinKind::Div => -g[i] * da[i] / (db[j] * db[j]),
                        };
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (da, db) = (self.val(*a), self.val(*b));
                send(*a, &|s| {
                    for i in 0..g.len() {
                        if da[i] <= db[i] {
                            s[i] += g[i];
                        }
                    }
                });
                send(*b, &|s| {
                    for i in 0..g.len() {
                        if da[i] > db[i] {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                send(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                send(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Exp(a) => send(*a, &|s| {
                for i in 0..g.len() {
                    s[i] += g[i] * out[i];
                }
            }),
            Op::Log(a) => {
                let da = self.val(*a);
                send(*a, &|s| {
                    for i in 0..g.len() {
                        s[i] += g[i] / da[i];
                    }
                })
            }
            Op::Tanh(a) => send(*a, &|s| {
                for i in 0..g.len() {
                    s[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(a) => send(*a, &|s| {
                for i in 0..g.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Sqrt(a) => send(*a, &|s| {
                for i in 0..g.len() {
                    s[i] += g[i] * 0.5 / out[i];
                }
            }),
            Op::MaxScalar(a, c) => {
                let (da, c) = (self.val(*a), *c);
                send(*a, &|s| {
                    for i in 0..g.len() {
                        if da[i] > c {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::MinScalar(a, c) => {
                let (da, c) = (self.val(*a), *c);
                send(*a, &|s| {
                    for i in 0..g.len() {
                        if da[i] < c {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let (da, lo, hi) = (self.val(*a), *lo, *hi);
                send(*a, &|s| {
                    for i in 0..g.len() {
                        if da[i] > lo && da[i] < hi {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (da, db) = (ta.data(), tb.data());
                // dA = G * B^T
                send(*a, &|s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &db[p * n..(p + 1) * n];
                            s[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = A^T * G
                send(*b, &|s| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (sv, gv) in s[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *sv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                send(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let (_, c) = self.nodes[id].value.rows_cols();
                send(*a, &|s| {
                    for (row, (gr, pr)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                        let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            s[row * c + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let (_, c) = self.nodes[id].value.rows_cols();
                send(*a, &|s| {
                    for (row, (gr, lr)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            s[row * c + j] += gr[j] - lr[j].exp() * total;
                        }
                    }
                })
            }
            Op::SumLast(a) => {
                let (_, c) = self.nodes[a.0].value.rows_cols();
                send(*a, &|s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        *sv += g[i / c];
                    }
                })
            }
            Op::SumFirst(a) => {
                let (_, c) = self.nodes[a.0].value.rows_cols();
                send(*a, &|s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        *sv += g[i % c];
                    }
                })
            }
            Op::SumAll(a) => send(*a, &|s| s.iter_mut().for_each(|sv| *sv += g[0])),
            Op::L2NormLast(a) => {
                let ta = &self.nodes[a.0].value;
                let (_, c) = ta.rows_cols();
                let da = ta.data();
                send(*a, &|s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        let nrm = out[i / c];
                        if nrm > 0.0 {
                            *sv += g[i / c] * da[i] / nrm;
                        }
                    }
                })
            }
            Op::Concat(parts, axis) => {
                let total_cols = self.nodes[id].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.nodes[p.0].value.shape();
                    let (pr, pc) = (ps[0], ps[1]);
                    let off = offset;
                    if *axis == 0 {
                        send(p, &|s| {
                            for (sv, gv) in s.iter_mut().zip(&g[off * pc..(off + pr) * pc]) {
                                *sv += gv;
                            }
                        });
                        offset += pr;
                    } else {
                        send(p, &|s| {
                            for i in 0..pr {
                                let src = &g[i * total_cols + off..i * total_cols + off + pc];
                                for (sv, gv) in s[i * pc..(i + 1) * pc].iter_mut().zip(src) {
                                    *sv += gv;
                                }
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Narrow(a, start, len) => {
                let (_, c) = self.nodes[a.0].value.rows_cols();
                let (start, len) = (*start, *len);
                send(*a, &|s| {
                    for (i, gr) in g.chunks(len).enumerate() {
                        for (sv, gv) in s[i * c + start..i * c + start + len].iter_mut().zip(gr) {
                            *sv += gv;
                        }
                    }
                })
            }
            Op::GatherRows(a, idx) => {
                let ta = &self.nodes[a.0].value;
                let width = ta.len() / ta.shape()[0];
                send(*a, &|s| {
                    for (k, &i) in idx.iter().enumerate() {
                        for (sv, gv) in s[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&g[k * width..(k + 1) * width])
                        {
                            *sv += gv;
                        }
                    }
                })
            }
            Op::Pick(a, idx) => {
                let (_, c) = self.nodes[a.0].value.rows_cols();
                send(*a, &|s| {
                    for (i, &j) in idx.iter().enumerate() {
                        s[i * c + j] += g[i];
                    }
                })
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one row into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - mx).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
