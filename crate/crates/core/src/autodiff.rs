//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as a node holding its output value and
//! the handles of its parents. Nodes are appended in evaluation order, so the
//! node list is already topologically sorted and [`Tape::backward`] is a
//! single reverse sweep that visits each node once.
//!
//! Every primitive checks its output for non-finite values and fails with
//! [`Error::NonFinite`] instead of letting NaN/inf propagate.
//!
//! ```
//! use relifusion::autodiff::Tape;
//! use relifusion::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let y = tape.leaf(Tensor::scalar(3.0));
//! let z = x.mul(y).unwrap();
//! let grads = tape.backward(z).unwrap();
//! assert_eq!(grads.wrt(x).item(), 3.0);
//! ```

use std::cell::{Ref, RefCell};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, numel, Tensor};

type Id = usize;

enum Op {
    Leaf,
    MatMul(Id, Id),
    Transpose(Id),
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    AddRow(Id, Id),
    MulRow(Id, Id),
    ScaleBy(Id, Id),
    Scale(Id, f64),
    Shift(Id),
    Reshape(Id),
    Gather(Id, Vec<Option<usize>>),
    ScatterAdd(Id, Vec<usize>),
    Concat(Vec<Id>),
    Softmax(Id),
    LogSoftmax(Id),
    Gelu(Id),
    Sigmoid(Id),
    Exp(Id),
    Log(Id),
    Abs(Id),
    Sum(Id),
    SumRows(Id),
    SumCols(Id),
    LayerNorm {
        x: Id,
        gain: Id,
        bias: Id,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Id,
        norms: Vec<f64>,
    },
    Focal {
        logits: Id,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    Bce {
        scores: Id,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.by_id(v.id)
    }

    pub(crate) fn by_id(&self, id: usize) -> Tensor {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn dims_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `(rows, cols)` for row-wise ops: a vector is one row.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        _ => {
            let c = *shape.last().unwrap();
            (numel(shape) / c, c)
        }
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Logistic function clamped to the open interval (0, 1).
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records an input tensor. Every leaf receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf)
    }

    fn push_unchecked(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        check_finite(name, value.data())?;
        Ok(self.push_unchecked(value, op))
    }

    fn value(&self, id: Id) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Flat concatenation of several tensors into a vector of their total length.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let n = data.len();
        self.push(
            "concat",
            Tensor::from_parts(vec![n], data),
            Op::Concat(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Stacks `[r_i × c]` matrices into `[Σr_i × c]`.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("stack of zero tensors".into()))?
            .shape();
        let mut rows = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != first[1] {
                return Err(dims_mismatch("stack_rows", &first, &s));
            }
            rows += s[0];
        }
        self.concat(parts)?.reshape(&[rows, first[1]])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Argument(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: Id, len: usize) -> &mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = node.value.data();
            let val = |i: Id| nodes[i].value.data();
            let len = |i: Id| nodes[i].value.len();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = rows_cols(nodes[*a].value.shape());
                    let n = nodes[*b].value.shape()[1];
                    let ga = acc(&mut grads, *a, m * k);
                    matmul_bt_into(&g, val(*b), ga, m, n, k);
                    let gb = acc(&mut grads, *b, k * n);
                    matmul_at_into(val(*a), &g, gb, m, k, n);
                }
                Op::Transpose(a) => {
                    let (r, c) = rows_cols(nodes[*a].value.shape());
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += y;
                    }
                    for (x, y) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::Sub(a, b) => {
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += y;
                    }
                    for (x, y) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *x -= y;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
                Op::AddRow(a, row) => {
                    let c = len(*row);
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += y;
                    }
                    let gr = acc(&mut grads, *row, c);
                    for (i, y) in g.iter().enumerate() {
                        gr[i % c] += y;
                    }
                }
                Op::MulRow(a, row) => {
                    let c = len(*row);
                    let (va, vr) = (val(*a), val(*row));
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vr[i % c];
                    }
                    let gr = acc(&mut grads, *row, c);
                    for i in 0..g.len() {
                        gr[i % c] += g[i] * va[i];
                    }
                }
                Op::ScaleBy(a, s) => {
                    let sv = val(*s)[0];
                    let va = val(*a);
                    let ds: f64 = g.iter().zip(va).map(|(x, y)| x * y).sum();
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += y * sv;
                    }
                    acc(&mut grads, *s, 1)[0] += ds;
                }
                Op::Scale(a, k) => {
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += y * k;
                    }
                }
                Op::Shift(a) | Op::Reshape(a) => {
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::Gather(a, idx) => {
                    let ga = acc(&mut grads, *a, len(*a));
                    for (i, src) in idx.iter().enumerate() {
                        if let Some(s) = src {
                            ga[*s] += g[i];
                        }
                    }
                }
                Op::ScatterAdd(a, idx) => {
                    let ga = acc(&mut grads, *a, len(*a));
                    for (i, dst) in idx.iter().enumerate() {
                        ga[i] += g[*dst];
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = len(*p);
                        for (x, y) in acc(&mut grads, *p, n).iter_mut().zip(&g[off..off + n]) {
                            *x += y;
                        }
                        off += n;
                    }
                }
                Op::Softmax(a) => {
                    let (r, c) = rows_cols(node.value.shape());
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (r, c) = rows_cols(node.value.shape());
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            ga[i * c + j] += gy[j] - y[j].exp() * total;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let va = val(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        let x = va[i];
                        ga[i] += g[i] * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                }
                Op::Log(a) => {
                    let va = val(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / va[i];
                    }
                }
                Op::Abs(a) => {
                    let va = val(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        let s = if va[i] > 0.0 {
                            1.0
                        } else if va[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += g[i] * s;
                    }
                }
                Op::Sum(a) => {
                    let n = len(*a);
                    for x in acc(&mut grads, *a, n).iter_mut() {
                        *x += g[0];
                    }
                }
                Op::SumRows(a) => {
                    let n = len(*a);
                    let c = g.len();
                    let ga = acc(&mut grads, *a, n);
                    for i in 0..n {
                        ga[i] += g[i % c];
                    }
                }
                Op::SumCols(a) => {
                    let n = len(*a);
                    let c = n / g.len();
                    let ga = acc(&mut grads, *a, n);
                    for i in 0..n {
                        ga[i] += g[i / c];
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = len(*gain);
                    let r = xhat.len() / c;
                    let vg = val(*gain).to_vec();
                    {
                        let gg = acc(&mut grads, *gain, c);
                        for i in 0..xhat.len() {
                            gg[i % c] += g[i] * xhat[i];
                        }
                    }
                    {
                        let gb = acc(&mut grads, *bias, c);
                        for i in 0..g.len() {
                            gb[i % c] += g[i];
                        }
                    }
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dxhat: Vec<f64> = g[row.clone()].iter().zip(&vg).map(|(a, b)| a * b).collect();
                        let xh = &xhat[row.clone()];
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let (r, c) = rows_cols(node.value.shape());
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            gx[i * c + j] += (gy[j] - y[j] * dot) / norms[i];
                        }
                    }
                }
                Op::Focal {
                    logits,
                    targets,
                    alpha,
                    gamma,
                } => {
                    let vx = val(*logits);
                    let gx = acc(&mut grads, *logits, g.len());
                    for i in 0..g.len() {
                        let x = vx[i];
                        let t = targets[i];
                        let p = sigmoid_scalar(x);
                        let log_p = -softplus(-x);
                        let log_q = -softplus(x);
                        let pos = alpha * (1.0 - p).powf(*gamma) * (gamma * p * log_p - (1.0 - p));
                        let neg = (1.0 - alpha) * p.powf(*gamma) * (p - gamma * (1.0 - p) * log_q);
                        gx[i] += g[i] * (t * pos + (1.0 - t) * neg);
                    }
                }
                Op::Bce { scores, targets } => {
                    let vs = val(*scores);
                    let gs = acc(&mut grads, *scores, g.len());
                    for i in 0..g.len() {
                        let (s, t) = (vs[i], targets[i]);
                        gs[i] += g[i] * (-t / s + (1.0 - t) / (1.0 - s));
                    }
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: impl FnOnce(Id) -> Op) -> Result<Var<'t>> {
        let v = self.value();
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        drop(v);
        self.tape.push(name, out, op(self.id))
    }

    fn same_shape(self, other: Var<'t>, name: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(dims_mismatch(name, &a, &b));
        }
        Ok(())
    }

    fn zip(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_shape(other, name)?;
        let out = {
            let (a, b) = (self.value(), other.value());
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        self.tape.push(name, out, op)
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = match a.shape() {
                [m, k] => (*m, *k),
                s => return Err(dims_mismatch("matmul", s, b.shape())),
            };
            let n = match b.shape() {
                [k2, n] if *k2 == k => *n,
                s => return Err(dims_mismatch("matmul", a.shape(), s)),
            };
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        };
        self.tape.push("matmul", out, Op::MatMul(self.id, other.id))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = a.dims2("transpose")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        };
        self.tape.push("transpose", out, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn row_broadcast(self, row: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let out = {
            let (a, r) = (self.value(), row.value());
            let (_, c) = rows_cols(a.shape());
            if r.len() != c || r.shape().len() != 1 {
                return Err(dims_mismatch(name, a.shape(), r.shape()));
            }
            let rd = r.data();
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().enumerate().map(|(i, &x)| f(x, rd[i % c])).collect(),
            )
        };
        self.tape.push(name, out, op)
    }

    /// Adds a `[c]` vector to every row of `[r×c]`.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, "add_row", |a, b| a + b, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row of `[r×c]` elementwise by a `[c]` vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, "mul_row", |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    /// Multiplies by a one-element tensor on the tape.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        if s.value().len() != 1 {
            return Err(dims_mismatch("scale_by", &self.shape(), &s.shape()));
        }
        let k = s.item();
        let out = self.value().map(|x| x * k);
        self.tape.push("scale_by", out, Op::ScaleBy(self.id, s.id))
    }

    pub fn scale(self, k: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * k, |a| Op::Scale(a, k))
    }

    pub fn add_scalar(self, k: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + k, Op::Shift)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape.push("reshape", out, Op::Reshape(self.id))
    }

    /// `out[i] = self[idx[i]]` over flat storage; `None` yields 0.
    pub fn gather(self, idx: Vec<Option<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        if numel(shape) != idx.len() {
            return Err(dims_mismatch("gather", shape, &[idx.len()]));
        }
        let out = {
            let a = self.value();
            let n = a.len();
            let mut out = Vec::with_capacity(idx.len());
            for s in &idx {
                match s {
                    Some(s) if *s >= n => {
                        return Err(Error::Index {
                            what: "gather",
                            index: *s,
                            len: n,
                        })
                    }
                    Some(s) => out.push(a.data()[*s]),
                    None => out.push(0.0),
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        };
        self.tape.push("gather", out, Op::Gather(self.id, idx))
    }

    /// `out[idx[i]] += self[i]` into a zero tensor of `shape`.
    pub fn scatter_add(self, idx: Vec<usize>, shape: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if idx.len() != a.len() {
                return Err(dims_mismatch("scatter_add", a.shape(), &[idx.len()]));
            }
            let n = numel(shape);
            let mut out = vec![0.0; n];
            for (i, &d) in idx.iter().enumerate() {
                if d >= n {
                    return Err(Error::Index {
                        what: "scatter_add",
                        index: d,
                        len: n,
                    });
                }
                out[d] += a.data()[i];
            }
            Tensor::from_parts(shape.to_vec(), out)
        };
        self.tape.push("scatter_add", out, Op::ScatterAdd(self.id, idx))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = rows_cols(a.shape());
            let mut out = a.data().to_vec();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        };
        if !self.value().all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        self.tape.push("softmax", out, Op::Softmax(self.id))
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = rows_cols(a.shape());
            let mut out = a.data().to_vec();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        };
        self.tape.push("log_softmax", out, Op::LogSoftmax(self.id))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary("gelu", |x| x * std_normal_cdf(x), Op::Gelu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid_scalar, Op::Sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite { op: "ln" });
        }
        self.unary("ln", f64::ln, Op::Log)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, Op::Abs)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums `[r×c]` over rows, giving `[c]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = rows_cols(a.shape());
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(&a.data()[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            Tensor::from_parts(vec![c], out)
        };
        self.tape.push("sum_rows", out, Op::SumRows(self.id))
    }

    pub fn mean_rows(self) -> Result<Var<'t>> {
        let (r, _) = rows_cols(&self.shape());
        self.sum_rows()?.scale(1.0 / r as f64)
    }

    /// Sums `[r×c]` over columns, giving `[r]`.
    pub fn sum_cols(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = rows_cols(a.shape());
            let out = (0..r).map(|i| a.data()[i * c..(i + 1) * c].iter().sum()).collect();
            Tensor::from_parts(vec![r], out)
        };
        self.tape.push("sum_cols", out, Op::SumCols(self.id))
    }

    /// Row-wise layer normalization followed by the affine `gain`/`bias`.
    ///
    /// A constant row normalizes to exactly zero.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, xhat, inv_std) = {
            let a = self.value();
            let (r, c) = rows_cols(a.shape());
            if c < 2 {
                return Err(Error::Argument(format!(
                    "layer_norm needs at least 2 features, got {c}"
                )));
            }
            let (g, b) = (gain.value(), bias.value());
            if g.len() != c || b.len() != c {
                return Err(dims_mismatch("layer_norm", a.shape(), g.shape()));
            }
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &a.data()[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                let constant = row.iter().all(|&v| v == row[0]);
                for j in 0..c {
                    let xh = if constant { 0.0 } else { (row[j] - mean) * is };
                    xhat[i * c + j] = xh;
                    out[i * c + j] = g.data()[j] * xh + b.data()[j];
                }
            }
            (Tensor::from_parts(a.shape().to_vec(), out), xhat, inv_std)
        };
        self.tape.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise L2 normalization; rows with norm `<= eps` are a [`Error::Degenerate`].
    pub fn l2_normalize_rows(self, eps: f64) -> Result<Var<'t>> {
        let (out, norms) = {
            let a = self.value();
            let (r, c) = rows_cols(a.shape());
            let mut norms = vec![0.0; r];
            let mut out = a.data().to_vec();
            for i in 0..r {
                let row = &mut out[i * c..(i + 1) * c];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n <= eps {
                    return Err(Error::Degenerate(format!("row {i} has norm {n}, cannot normalize")));
                }
                norms[i] = n;
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            (Tensor::from_parts(a.shape().to_vec(), out), norms)
        };
        self.tape
            .push("l2_normalize", out, Op::L2Normalize { x: self.id, norms })
    }

    /// Elementwise sigmoid focal loss of logits against targets in `[0, 1]`.
    pub fn sigmoid_focal(self, targets: Vec<f64>, alpha: f64, gamma: f64) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if targets.len() != a.len() {
                return Err(dims_mismatch("focal", a.shape(), &[targets.len()]));
            }
            let data = a
                .data()
                .iter()
                .zip(&targets)
                .map(|(&x, &t)| {
                    let p = sigmoid_scalar(x);
                    let pos = alpha * (1.0 - p).powf(gamma) * softplus(-x);
                    let neg = (1.0 - alpha) * p.powf(gamma) * softplus(x);
                    t * pos + (1.0 - t) * neg
                })
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape.push(
            "focal",
            out,
            Op::Focal {
                logits: self.id,
                targets,
                alpha,
                gamma,
            },
        )
    }

    /// Elementwise binary cross-entropy of probabilities against targets.
    pub fn bce(self, targets: Vec<f64>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if targets.len() != a.len() {
                return Err(dims_mismatch("bce", a.shape(), &[targets.len()]));
            }
            if a.data().iter().any(|&s| s <= 0.0 || s >= 1.0) {
                return Err(Error::Argument("bce scores must lie strictly inside (0, 1)".into()));
            }
            let data = a
                .data()
                .iter()
                .zip(&targets)
                .map(|(&s, &t)| -(t * s.ln() + (1.0 - t) * (1.0 - s).ln()))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape.push(
            "bce",
            out,
            Op::Bce {
                scores: self.id,
                targets,
            },
        )
    }
}
