//! Tape of recorded operations and the reverse pass over it.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, numel, Scalar, Tensor};

/// Handle to a value produced on a [`Graph`].
///
/// A `Var` without a node is a constant: gradients never flow into it.
#[derive(Clone, Debug)]
pub struct Var<S: Scalar = f64> {
    value: Rc<Tensor<S>>,
    node: Option<usize>,
}

impl<S: Scalar> Var<S> {
    pub fn constant(t: Tensor<S>) -> Self {
        Var { value: Rc::new(t), node: None }
    }

    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// The scalar held by a one-element tensor.
    pub fn item(&self) -> S {
        self.value.data()[0]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    Relu,
    Softplus,
    Sqrt,
    NormalCdf,
    Softmax,
    LogSoftmax,
    CrossEntropy(Rc<[usize]>),
    Take(Rc<[usize]>),
    PutAdd(Rc<[usize]>),
    Slice(usize),
    Reshape,
    Concat(usize),
    Sum(Option<usize>),
    KlUniform,
    CvSquared,
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op,
    inputs: Vec<Var<S>>,
    out: Rc<Tensor<S>>,
}

/// Records differentiable operations in topological order.
///
/// A graph built with [`Graph::no_grad`] evaluates every op but never records
/// a node, so its [`node_count`](Graph::node_count) stays at zero.
#[derive(Debug)]
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    recording: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: &Var<S>) -> Option<&Tensor<S>> {
        v.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    pub fn take(&mut self, v: &Var<S>) -> Option<Tensor<S>> {
        v.node.and_then(|id| self.grads.get_mut(id)?.take())
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::config(format!("{op}: shape mismatch {a:?} vs {b:?}"))
}

fn check_finite<S: Scalar>(op: &'static str, t: &Tensor<S>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite value"))
    }
}

fn max_value<S: Scalar>(xs: impl Iterator<Item = S>) -> f64 {
    xs.map(Scalar::value).fold(f64::NEG_INFINITY, f64::max)
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recording: true }
    }

    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Registers a leaf that gradients flow into (a constant in no-grad mode).
    pub fn param(&mut self, t: Tensor<S>) -> Var<S> {
        let value = Rc::new(t);
        if !self.recording {
            return Var { value, node: None };
        }
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), out: value.clone() });
        Var { value, node: Some(self.nodes.len() - 1) }
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<S> {
        Var::constant(t)
    }

    /// Standard normal samples as a constant.
    pub fn randn(&self, shape: &[usize], rng: &mut Rng) -> Var<S> {
        Var::constant(Tensor::from_f64(&Tensor::randn(shape, rng)))
    }

    fn record(&mut self, op: Op, inputs: &[&Var<S>], out: Tensor<S>) -> Var<S> {
        let value = Rc::new(out);
        if self.recording && inputs.iter().any(|v| v.node.is_some()) {
            self.nodes.push(Node { op, inputs: inputs.iter().map(|v| (*v).clone()).collect(), out: value.clone() });
            Var { value, node: Some(self.nodes.len() - 1) }
        } else {
            Var { value, node: None }
        }
    }

    fn finish(&mut self, name: &'static str, op: Op, inputs: &[&Var<S>], out: Tensor<S>) -> Result<Var<S>> {
        check_finite(name, &out)?;
        Ok(self.record(op, inputs, out))
    }

    pub fn matmul(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let (m, k) = a.value.dims2()?;
        let (k2, n) = b.value.dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let data = matmul_raw(a.value.data(), b.value.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.finish("matmul", Op::MatMul, &[a, b], out)
    }

    /// `x (B×n) + bias (n)` broadcast over rows.
    pub fn add_bias(&mut self, x: &Var<S>, bias: &Var<S>) -> Result<Var<S>> {
        let (_, n) = x.value.dims2()?;
        if bias.value.len() != n {
            return Err(mismatch("add_bias", x.shape(), bias.shape()));
        }
        let mut out = (*x.value).clone();
        let b = bias.value.data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.finish("add_bias", Op::AddBias, &[x, bias], out)
    }

    /// `x·w + b`.
    pub fn linear(&mut self, x: &Var<S>, w: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let xw = self.matmul(x, w)?;
        self.add_bias(&xw, b)
    }

    fn binary(&mut self, name: &'static str, op: Op, a: &Var<S>, b: &Var<S>, f: impl Fn(S, S) -> S) -> Result<Var<S>> {
        if a.shape() != b.shape() {
            return Err(mismatch(name, a.shape(), b.shape()));
        }
        let out = a.value.zip(&b.value, f);
        self.finish(name, op, &[a, b], out)
    }

    pub fn add(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        self.binary("div", Op::Div, a, b, |x, y| x / y)
    }

    pub fn square(&mut self, a: &Var<S>) -> Result<Var<S>> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: &Var<S>, c: f64) -> Result<Var<S>> {
        let cs = S::from_f64(c);
        let out = a.value.map(|x| x * cs);
        self.finish("scale", Op::Scale(c), &[a], out)
    }

    pub fn add_scalar(&mut self, a: &Var<S>, c: f64) -> Result<Var<S>> {
        let cs = S::from_f64(c);
        let out = a.value.map(|x| x + cs);
        self.finish("add_scalar", Op::AddScalar, &[a], out)
    }

    pub fn relu(&mut self, a: &Var<S>) -> Result<Var<S>> {
        let out = a.value.map(|x| if x.value() > 0.0 { x } else { S::zero() });
        self.finish("relu", Op::Relu, &[a], out)
    }

    pub fn softplus(&mut self, a: &Var<S>) -> Result<Var<S>> {
        check_finite("softplus", &a.value)?;
        let out = a.value.map(S::softplus);
        self.finish("softplus", Op::Softplus, &[a], out)
    }

    pub fn sqrt(&mut self, a: &Var<S>) -> Result<Var<S>> {
        if a.value.data().iter().any(|x| x.value() < 0.0) {
            return Err(Error::numeric("sqrt", "negative input"));
        }
        let out = a.value.map(S::sqrt);
        self.finish("sqrt", Op::Sqrt, &[a], out)
    }

    pub fn normal_cdf(&mut self, a: &Var<S>) -> Result<Var<S>> {
        check_finite("normal_cdf", &a.value)?;
        let out = a.value.map(S::norm_cdf);
        self.finish("normal_cdf", Op::NormalCdf, &[a], out)
    }

    /// Row-wise softmax over the last axis of a matrix.
    pub fn softmax(&mut self, x: &Var<S>) -> Result<Var<S>> {
        self.softmax_impl("softmax", x, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries come out as exact zeros.
    pub fn masked_softmax(&mut self, x: &Var<S>, mask: Vec<bool>) -> Result<Var<S>> {
        if mask.len() != x.value.len() {
            return Err(Error::config(format!(
                "masked_softmax: mask has {} entries for shape {:?}",
                mask.len(),
                x.shape()
            )));
        }
        self.softmax_impl("masked_softmax", x, Some(mask.into()))
    }

    fn softmax_impl(&mut self, name: &'static str, x: &Var<S>, mask: Option<Rc<[bool]>>) -> Result<Var<S>> {
        check_finite(name, &x.value)?;
        let (_, n) = x.value.dims2()?;
        let mut out = Tensor::zeros(x.shape());
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        for (r, (xrow, orow)) in x.value.data().chunks(n).zip(out.data_mut().chunks_mut(n)).enumerate() {
            let base = r * n;
            let m = max_value((0..n).filter(|&j| keep(base + j)).map(|j| xrow[j]));
            if m == f64::NEG_INFINITY {
                return Err(Error::config(format!("{name}: row {r} has no active entries")));
            }
            let ms = S::from_f64(m);
            let mut total = S::zero();
            for j in 0..n {
                if keep(base + j) {
                    let e = (xrow[j] - ms).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for (j, o) in orow.iter_mut().enumerate() {
                if keep(base + j) {
                    *o = *o / total;
                }
            }
        }
        self.finish(name, Op::Softmax, &[x], out)
    }

    pub fn log_softmax(&mut self, x: &Var<S>) -> Result<Var<S>> {
        check_finite("log_softmax", &x.value)?;
        let (_, n) = x.value.dims2()?;
        let mut out = Tensor::zeros(x.shape());
        for (xrow, orow) in x.value.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
            let lse = log_sum_exp(xrow);
            for (o, &v) in orow.iter_mut().zip(xrow) {
                *o = v - lse;
            }
        }
        self.finish("log_softmax", Op::LogSoftmax, &[x], out)
    }

    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy(&mut self, logits: &Var<S>, labels: &[usize]) -> Result<Var<S>> {
        check_finite("cross_entropy", &logits.value)?;
        let (b, c) = logits.value.dims2()?;
        if labels.len() != b || b == 0 {
            return Err(Error::config(format!(
                "cross_entropy: {} labels for logits {:?}",
                labels.len(),
                logits.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::config(format!("cross_entropy: label {bad} >= {c} classes")));
        }
        let mut total = S::zero();
        for (row, &l) in logits.value.data().chunks(c).zip(labels) {
            total += log_sum_exp(row) - row[l];
        }
        let out = Tensor::scalar(total.scale(1.0 / b as f64));
        self.finish("cross_entropy", Op::CrossEntropy(labels.into()), &[logits], out)
    }

    /// Flat gather: `out[t] = x[idx[t]]`, reshaped to `shape`.
    pub fn take(&mut self, x: &Var<S>, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var<S>> {
        if numel(&shape) != idx.len() {
            return Err(Error::config(format!("take: {} indices for shape {shape:?}", idx.len())));
        }
        let src = x.value.data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::config(format!("take: index {bad} out of range for {:?}", x.shape())));
        }
        let out = Tensor::new(shape, idx.iter().map(|&i| src[i]).collect())?;
        self.finish("take", Op::Take(idx.into()), &[x], out)
    }

    /// Flat scatter-add, the adjoint of [`take`](Self::take): `out[idx[t]] += x[t]`.
    pub fn put_add(&mut self, x: &Var<S>, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var<S>> {
        if idx.len() != x.value.len() {
            return Err(Error::config(format!("put_add: {} indices for {:?}", idx.len(), x.shape())));
        }
        let mut out = Tensor::zeros(&shape);
        let dst = out.data_mut();
        for (&i, &v) in idx.iter().zip(x.value.data()) {
            if i >= dst.len() {
                return Err(Error::config(format!("put_add: index {i} out of range for {shape:?}")));
            }
            dst[i] += v;
        }
        self.finish("put_add", Op::PutAdd(idx.into()), &[x], out)
    }

    pub fn gather_rows(&mut self, x: &Var<S>, rows: &[usize]) -> Result<Var<S>> {
        let (r, c) = x.value.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::config(format!("gather_rows: row {bad} out of range for {r} rows")));
        }
        let idx = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.take(x, idx, vec![rows.len(), c])
    }

    /// Adds row `t` of `x` into row `rows[t]` of a fresh `total_rows × c` matrix.
    pub fn scatter_add_rows(&mut self, x: &Var<S>, rows: &[usize], total_rows: usize) -> Result<Var<S>> {
        let (r, c) = x.value.dims2()?;
        if rows.len() != r {
            return Err(Error::config(format!("scatter_add_rows: {} targets for {r} rows", rows.len())));
        }
        let idx = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.put_add(x, idx, vec![total_rows, c])
    }

    /// Column `j` of a matrix as a `B×1` matrix.
    pub fn column(&mut self, x: &Var<S>, j: usize) -> Result<Var<S>> {
        let (r, c) = x.value.dims2()?;
        if j >= c {
            return Err(Error::config(format!("column: {j} out of range for {c} columns")));
        }
        self.take(x, (0..r).map(|i| i * c + j).collect(), vec![r, 1])
    }

    /// Repeats a `B×1` column across `n` columns.
    pub fn broadcast_cols(&mut self, x: &Var<S>, n: usize) -> Result<Var<S>> {
        let (r, c) = x.value.dims2()?;
        if c != 1 {
            return Err(mismatch("broadcast_cols", x.shape(), &[r, 1]));
        }
        self.take(x, (0..r).flat_map(|i| std::iter::repeat_n(i, n)).collect(), vec![r, n])
    }

    /// Contiguous range of a flat tensor, reshaped.
    pub fn slice(&mut self, x: &Var<S>, offset: usize, shape: Vec<usize>) -> Result<Var<S>> {
        let len = numel(&shape);
        if offset + len > x.value.len() {
            return Err(Error::config(format!(
                "slice: [{offset}, {}) out of range for {} elements",
                offset + len,
                x.value.len()
            )));
        }
        let out = Tensor::new(shape, x.value.data()[offset..offset + len].to_vec())?;
        Ok(self.record(Op::Slice(offset), &[x], out))
    }

    pub fn reshape(&mut self, x: &Var<S>, shape: Vec<usize>) -> Result<Var<S>> {
        let out = (*x.value).clone().reshape(shape)?;
        Ok(self.record(Op::Reshape, &[x], out))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, xs: &[&Var<S>], axis: usize) -> Result<Var<S>> {
        let first = xs.first().ok_or_else(|| Error::config("concat: no inputs"))?;
        let (r0, c0) = first.value.dims2()?;
        let mut dims = Vec::with_capacity(xs.len());
        for x in xs {
            let (r, c) = x.value.dims2()?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(Error::config(format!("concat: axis {axis} on matrices"))),
            };
            if !ok {
                return Err(mismatch("concat", first.shape(), x.shape()));
            }
            dims.push((r, c));
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let data = xs.iter().flat_map(|x| x.value.data().iter().copied()).collect();
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for x in xs {
                    data.extend_from_slice(x.value.row(i));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        Ok(self.record(Op::Concat(axis), xs, out))
    }

    /// Sum over everything (`None`) or one axis of a matrix (kept as size 1).
    pub fn sum(&mut self, x: &Var<S>, axis: Option<usize>) -> Result<Var<S>> {
        let out = match axis {
            None => {
                let mut acc = S::zero();
                for &v in x.value.data() {
                    acc += v;
                }
                Tensor::scalar(acc)
            }
            Some(0) => {
                let (_, c) = x.value.dims2()?;
                let mut out = Tensor::zeros(&[1, c]);
                for row in x.value.data().chunks(c) {
                    for (o, &v) in out.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            }
            Some(1) => {
                let (r, c) = x.value.dims2()?;
                let data = x
                    .value
                    .data()
                    .chunks(c)
                    .map(|row| {
                        let mut acc = S::zero();
                        for &v in row {
                            acc += v;
                        }
                        acc
                    })
                    .collect();
                Tensor::new(vec![r, 1], data)?
            }
            Some(a) => return Err(Error::config(format!("sum: axis {a} on a matrix"))),
        };
        self.finish("sum", Op::Sum(axis), &[x], out)
    }

    pub fn mean(&mut self, x: &Var<S>, axis: Option<usize>) -> Result<Var<S>> {
        let count = match axis {
            None => x.value.len(),
            Some(a) => *x.shape().get(a).ok_or_else(|| Error::config(format!("mean: axis {a} for {:?}", x.shape())))?,
        };
        if count == 0 {
            return Err(Error::config("mean of empty tensor"));
        }
        let s = self.sum(x, axis)?;
        self.scale(&s, 1.0 / count as f64)
    }

    /// `Σ pᵢ ln(pᵢ·n)`, the KL divergence of `p` from the uniform distribution
    /// over its `n` entries, with `0·ln 0 = 0`.
    pub fn kl_uniform(&mut self, p: &Var<S>) -> Result<Var<S>> {
        let n = p.value.len();
        if p.value.data().iter().any(|x| x.value() < 0.0) {
            return Err(Error::numeric("kl_uniform", "negative probability"));
        }
        let nf = S::from_f64(n as f64);
        let mut acc = S::zero();
        for &x in p.value.data() {
            if x.value() > 0.0 {
                acc += x * (x * nf).ln();
            }
        }
        self.finish("kl_uniform", Op::KlUniform, &[p], Tensor::scalar(acc))
    }

    /// Squared coefficient of variation with population variance,
    /// `n·Σx² / (Σx)² − 1`.
    pub fn cv_squared(&mut self, x: &Var<S>) -> Result<Var<S>> {
        let n = x.value.len() as f64;
        let (s, q) = sums(x.value.data());
        if s.value() == 0.0 {
            return Err(Error::numeric("cv_squared", "zero total"));
        }
        let out = q.scale(n) / (s * s) - S::one();
        self.finish("cv_squared", Op::CvSquared, &[x], Tensor::scalar(out))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: &Var<S>) -> Result<Gradients<S>> {
        if !loss.value.is_scalar() {
            return Err(Error::usage(format!("backward needs a scalar loss, got shape {:?}", loss.shape())));
        }
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        let Some(root) = loss.node else {
            return Ok(Gradients { grads: adj });
        };
        if root >= self.nodes.len() || !Rc::ptr_eq(&self.nodes[root].out, &loss.value) {
            return Err(Error::usage("loss was not produced by this graph"));
        }
        adj[root] = Some(Tensor::full(loss.shape(), S::one()));
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        for id in (0..=root).rev() {
            let Some(dy) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                grads[id] = Some(dy);
                continue;
            }
            backprop(node, dy, &mut adj)?;
        }
        Ok(Gradients { grads })
    }
}

fn sums<S: Scalar>(xs: &[S]) -> (S, S) {
    let mut s = S::zero();
    let mut q = S::zero();
    for &v in xs {
        s += v;
        q += v * v;
    }
    (s, q)
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let m = S::from_f64(max_value(row.iter().copied()));
    let mut total = S::zero();
    for &v in row {
        total += (v - m).exp();
    }
    m + total.ln()
}

fn accumulate<S: Scalar>(adj: &mut [Option<Tensor<S>>], input: &Var<S>, g: Tensor<S>) {
    let Some(id) = input.node else { return };
    match &mut adj[id] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn adjoint_slot<'a, S: Scalar>(adj: &'a mut [Option<Tensor<S>>], input: &Var<S>) -> Option<&'a mut Tensor<S>> {
    let id = input.node?;
    Some(adj[id].get_or_insert_with(|| Tensor::zeros(input.shape())))
}

fn backprop<S: Scalar>(node: &Node<S>, dy: Tensor<S>, adj: &mut [Option<Tensor<S>>]) -> Result<()> {
    let ins = &node.inputs;
    let x = || ins[0].value();
    match &node.op {
        Op::Leaf => unreachable!("leaves are handled by the caller"),
        Op::MatMul => {
            let (a, b) = (ins[0].value(), ins[1].value());
            let (m, k) = a.dims2()?;
            let (_, n) = b.dims2()?;
            if ins[0].requires_grad() {
                let da = matmul_nt(dy.data(), b.data(), m, n, k);
                accumulate(adj, &ins[0], Tensor::new(vec![m, k], da)?);
            }
            if ins[1].requires_grad() {
                let db = matmul_tn(a.data(), dy.data(), m, k, n);
                accumulate(adj, &ins[1], Tensor::new(vec![k, n], db)?);
            }
        }
        Op::AddBias => {
            if ins[1].requires_grad() {
                let n = ins[1].value().len();
                let mut db = Tensor::zeros(ins[1].shape());
                for row in dy.data().chunks(n) {
                    for (o, &v) in db.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(adj, &ins[1], db);
            }
            accumulate(adj, &ins[0], dy);
        }
        Op::Add => {
            accumulate(adj, &ins[1], dy.clone());
            accumulate(adj, &ins[0], dy);
        }
        Op::Sub => {
            accumulate(adj, &ins[1], dy.map(|v| -v));
            accumulate(adj, &ins[0], dy);
        }
        Op::Mul => {
            let (a, b) = (ins[0].value(), ins[1].value());
            if ins[0].requires_grad() {
                accumulate(adj, &ins[0], dy.zip(b, |g, bv| g * bv));
            }
            if ins[1].requires_grad() {
                accumulate(adj, &ins[1], dy.zip(a, |g, av| g * av));
            }
        }
        Op::Div => {
            let b = ins[1].value();
            if ins[0].requires_grad() {
                accumulate(adj, &ins[0], dy.zip(b, |g, bv| g / bv));
            }
            if ins[1].requires_grad() {
                let a = ins[0].value();
                let mut db = Tensor::zeros(b.shape());
                for (((o, &g), &av), &bv) in db.data_mut().iter_mut().zip(dy.data()).zip(a.data()).zip(b.data()) {
                    *o = -(g * av) / (bv * bv);
                }
                accumulate(adj, &ins[1], db);
            }
        }
        Op::Scale(c) => {
            let cs = S::from_f64(*c);
            accumulate(adj, &ins[0], dy.map(|g| g * cs));
        }
        Op::AddScalar | Op::Reshape => {
            let shape = ins[0].shape().to_vec();
            accumulate(adj, &ins[0], dy.reshape(shape)?);
        }
        Op::Relu => {
            let dx = dy.zip(x(), |g, v| if v.value() > 0.0 { g } else { S::zero() });
            accumulate(adj, &ins[0], dx);
        }
        Op::Softplus => {
            accumulate(adj, &ins[0], dy.zip(x(), |g, v| g * v.sigmoid()));
        }
        Op::Sqrt => {
            let half = S::from_f64(0.5);
            let dx = dy.zip(&node.out, |g, s| if s.value() == 0.0 { S::zero() } else { g * half / s });
            accumulate(adj, &ins[0], dx);
        }
        Op::NormalCdf => {
            accumulate(adj, &ins[0], dy.zip(x(), |g, v| g * v.norm_pdf()));
        }
        Op::Softmax => {
            let y = &node.out;
            let (_, n) = y.dims2()?;
            let mut dx = Tensor::zeros(y.shape());
            for ((yr, gr), dr) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(dx.data_mut().chunks_mut(n)) {
                let mut dot = S::zero();
                for (&yv, &gv) in yr.iter().zip(gr) {
                    dot += yv * gv;
                }
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            accumulate(adj, &ins[0], dx);
        }
        Op::LogSoftmax => {
            let y = &node.out;
            let (_, n) = y.dims2()?;
            let mut dx = Tensor::zeros(y.shape());
            for ((yr, gr), dr) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(dx.data_mut().chunks_mut(n)) {
                let mut total = S::zero();
                for &gv in gr {
                    total += gv;
                }
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = gv - yv.exp() * total;
                }
            }
            accumulate(adj, &ins[0], dx);
        }
        Op::CrossEntropy(labels) => {
            let logits = x();
            let (b, c) = logits.dims2()?;
            let g = dy.data()[0].scale(1.0 / b as f64);
            let mut dx = Tensor::zeros(logits.shape());
            for ((row, dr), &l) in logits.data().chunks(c).zip(dx.data_mut().chunks_mut(c)).zip(labels.iter()) {
                let lse = log_sum_exp(row);
                for (j, (d, &v)) in dr.iter_mut().zip(row).enumerate() {
                    let p = (v - lse).exp();
                    *d = if j == l { g * (p - S::one()) } else { g * p };
                }
            }
            accumulate(adj, &ins[0], dx);
        }
        Op::Take(idx) => {
            if let Some(slot) = adjoint_slot(adj, &ins[0]) {
                let d = slot.data_mut();
                for (&i, &g) in idx.iter().zip(dy.data()) {
                    d[i] += g;
                }
            }
        }
        Op::PutAdd(idx) => {
            let src = dy.data();
            let dx = Tensor::new(ins[0].shape().to_vec(), idx.iter().map(|&i| src[i]).collect())?;
            accumulate(adj, &ins[0], dx);
        }
        Op::Slice(offset) => {
            if let Some(slot) = adjoint_slot(adj, &ins[0]) {
                for (a, &g) in slot.data_mut()[*offset..].iter_mut().zip(dy.data()) {
                    *a += g;
                }
            }
        }
        Op::Concat(axis) => {
            let (_, cols) = dy.dims2()?;
            let mut offset = 0;
            for input in ins {
                let (r, c) = input.value().dims2()?;
                let piece: Vec<S> = if *axis == 0 {
                    dy.data()[offset * cols..(offset + r) * cols].to_vec()
                } else {
                    (0..r).flat_map(|i| dy.data()[i * cols + offset..i * cols + offset + c].iter().copied()).collect()
                };
                offset += if *axis == 0 { r } else { c };
                if input.requires_grad() {
                    accumulate(adj, input, Tensor::new(vec![r, c], piece)?);
                }
            }
        }
        Op::Sum(axis) => {
            let shape = ins[0].shape().to_vec();
            let dx = match axis {
                None => Tensor::full(&shape, dy.data()[0]),
                Some(0) => {
                    let c = shape[1];
                    let data = (0..numel(&shape)).map(|i| dy.data()[i % c]).collect();
                    Tensor::new(shape, data)?
                }
                _ => {
                    let c = shape[1];
                    let data = (0..numel(&shape)).map(|i| dy.data()[i / c]).collect();
                    Tensor::new(shape, data)?
                }
            };
            accumulate(adj, &ins[0], dx);
        }
        Op::KlUniform => {
            let p = x();
            let g = dy.data()[0];
            let nf = S::from_f64(p.len() as f64);
            let dx = p.map(|v| if v.value() > 0.0 { g * ((v * nf).ln() + S::one()) } else { S::zero() });
            accumulate(adj, &ins[0], dx);
        }
        Op::CvSquared => {
            let xs = x();
            let n = xs.len() as f64;
            let (s, q) = sums(xs.data());
            let g = dy.data()[0];
            let s2 = s * s;
            let tail = q.scale(2.0 * n) / (s2 * s);
            let dx = xs.map(|v| g * (v.scale(2.0 * n) / s2 - tail));
            accumulate(adj, &ins[0], dx);
        }
    }
    Ok(())
}
