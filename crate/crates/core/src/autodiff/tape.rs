use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{dim_err, Error, Result};

const LAYERNORM_EPS: f64 = 1e-5;

/// How the second operand of a binary op is broadcast against the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// One value per column, repeated down the rows.
    Row,
    /// One value per row, repeated across the columns.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(usize, usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize, Bcast),
    Scale(usize, f64),
    Shift(usize),
    Relu(usize),
    Abs(usize),
    Softmax(usize),
    LayerNorm(usize, Vec<f64>),
    Gather(usize, Vec<Option<usize>>),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColSum(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Power(usize, f64),
    Transpose(usize),
    Reshape(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Heaviside,
    HeavisideSte(usize, f64),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations in evaluation order so gradients can be replayed backwards.
///
/// Node ids increase monotonically, so every node's inputs precede it and a single
/// reverse sweep visits each node once. Operations whose inputs carry no gradient
/// keep only their value.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad {
            op
        } else if matches!(op, Op::Leaf) {
            Op::Leaf
        } else {
            Op::Const
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable input: gradients flow to it and `backward` accumulates into it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    /// A constant that shares its storage with the caller.
    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_rc(value, Op::Const, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(
        &self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: op_name });
        }
        let rg = inputs.iter().any(|&i| self.requires(i));
        Ok(self.push(value, op, rg))
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse sweep from `out` seeded with `seed`; returns the gradient of every node.
    fn sweep(&self, out: usize, seed: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let nodes = self.nodes.borrow();
        if seed.numel() != nodes[out].value.numel() {
            return dim_err(
                "backward",
                format!(
                    "seed has {} values, output has {}",
                    seed.numel(),
                    nodes[out].value.numel()
                ),
            );
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out).map(|_| None).collect();
        if !nodes[out].requires_grad {
            return Ok(grads);
        }
        grads[out] = Some(Tensor::new(
            nodes[out].value.shape().to_vec(),
            seed.data().to_vec(),
        )?);

        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = &node.value;
            let gd = g.data();
            let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[target].requires_grad {
                    return;
                }
                let slot = grads[target]
                    .get_or_insert_with(|| Tensor::zeros(nodes[target].value.shape().to_vec()));
                f(slot.data_mut());
            };
            match &node.op {
                Op::Leaf | Op::Const => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    acc(*a, &mut |s| matmul_nt_acc(gd, bv.data(), s, n, k, m));
                    acc(*b, &mut |s| matmul_tn_acc(av.data(), gd, s, n, k, m));
                }
                Op::Add(a, b, bc) => {
                    acc(*a, &mut |s| add_into(s, gd, 1.0));
                    let cols = val.cols();
                    acc(*b, &mut |s| reduce_into(s, gd, *bc, cols, |g, _| g));
                }
                Op::Sub(a, b, bc) => {
                    acc(*a, &mut |s| add_into(s, gd, 1.0));
                    let cols = val.cols();
                    acc(*b, &mut |s| reduce_into(s, gd, *bc, cols, |g, _| -g));
                }
                Op::Mul(a, b, bc) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let cols = val.cols();
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            *x += gd[i] * bv.data()[bidx(*bc, i, cols)];
                        }
                    });
                    acc(*b, &mut |s| {
                        reduce_into(s, gd, *bc, cols, |g, i| g * av.data()[i])
                    });
                }
                Op::Div(a, b, bc) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let cols = val.cols();
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            *x += gd[i] / bv.data()[bidx(*bc, i, cols)];
                        }
                    });
                    acc(*b, &mut |s| {
                        reduce_into(s, gd, *bc, cols, |g, i| {
                            let d = bv.data()[bidx(*bc, i, cols)];
                            -g * av.data()[i] / (d * d)
                        })
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |s| add_into(s, gd, *c)),
                Op::Shift(a) | Op::Reshape(a) => acc(*a, &mut |s| add_into(s, gd, 1.0)),
                Op::Relu(a) => {
                    let av = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            if av.data()[i] > 0.0 {
                                *x += gd[i];
                            }
                        }
                    });
                }
                Op::Abs(a) => {
                    let av = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            let v = av.data()[i];
                            if v > 0.0 {
                                *x += gd[i];
                            } else if v < 0.0 {
                                *x -= gd[i];
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let cols = val.cols();
                    let y = val.data();
                    acc(*a, &mut |s| {
                        for r in 0..y.len() / cols {
                            let lo = r * cols;
                            let dot: f64 = (lo..lo + cols).map(|i| gd[i] * y[i]).sum();
                            for i in lo..lo + cols {
                                s[i] += y[i] * (gd[i] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm(a, inv_std) => {
                    let cols = val.cols();
                    let y = val.data();
                    acc(*a, &mut |s| {
                        let n = cols as f64;
                        for (r, &rs) in inv_std.iter().enumerate() {
                            let lo = r * cols;
                            let mg: f64 = gd[lo..lo + cols].iter().sum::<f64>() / n;
                            let mgy: f64 = (lo..lo + cols).map(|i| gd[i] * y[i]).sum::<f64>() / n;
                            for i in lo..lo + cols {
                                s[i] += rs * (gd[i] - mg - y[i] * mgy);
                            }
                        }
                    });
                }
                Op::Gather(a, idx) => acc(*a, &mut |s| {
                    for (o, src) in idx.iter().enumerate() {
                        if let Some(j) = src {
                            s[*j] += gd[o];
                        }
                    }
                }),
                Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += gd[0])),
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel() as f64;
                    acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += gd[0] / n));
                }
                Op::RowSum(a) => {
                    let cols = nodes[*a].value.cols();
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            *x += gd[i / cols];
                        }
                    });
                }
                Op::ColSum(a) => {
                    let cols = nodes[*a].value.cols();
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            *x += gd[i % cols];
                        }
                    });
                }
                Op::Exp(a) => acc(*a, &mut |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += gd[i] * val.data()[i];
                    }
                }),
                Op::Log(a) => {
                    let av = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            *x += gd[i] / av.data()[i];
                        }
                    });
                }
                Op::Sqrt(a) => acc(*a, &mut |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += gd[i] * 0.5 / val.data()[i];
                    }
                }),
                Op::Power(a, p) => {
                    let av = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            *x += gd[i] * p * av.data()[i].powf(p - 1.0);
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = (val.shape()[0], val.shape()[1]);
                    acc(*a, &mut |s| {
                        for i in 0..r {
                            for j in 0..c {
                                s[j * r + i] += gd[i * c + j];
                            }
                        }
                    });
                }
                Op::SliceCols(a, start) => {
                    let src_cols = nodes[*a].value.cols();
                    let c = val.cols();
                    acc(*a, &mut |s| {
                        for r in 0..val.rows() {
                            for j in 0..c {
                                s[r * src_cols + start + j] += gd[r * c + j];
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = val.cols();
                    let mut off = 0;
                    for &p in parts {
                        let c = nodes[p].value.cols();
                        acc(p, &mut |s| {
                            for r in 0..val.rows() {
                                for j in 0..c {
                                    s[r * c + j] += gd[r * total + off + j];
                                }
                            }
                        });
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.numel();
                        acc(p, &mut |s| add_into(s, &gd[off..off + n], 1.0));
                        off += n;
                    }
                }
                Op::Heaviside => return Err(Error::UnsupportedOp("heaviside")),
                Op::HeavisideSte(a, eps) => {
                    let av = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            if av.data()[i].abs() < eps / 2.0 {
                                *x += gd[i] / eps;
                            }
                        }
                    });
                }
            }
        }
        Ok(grads)
    }

    /// Vector–Jacobian product: gradient of `⟨seed, out⟩` with respect to each of `wrt`.
    ///
    /// Leaf accumulators are left untouched.
    pub fn vjp(&self, out: Var<'_>, seed: &Tensor, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let mut grads = self.sweep(out.id, seed)?;
        wrt.iter()
            .map(|w| {
                let g = if w.id <= out.id {
                    grads[w.id].take()
                } else {
                    None
                };
                let g = g.unwrap_or_else(|| Tensor::zeros(w.shape()));
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(Error::Numeric { op: "backward" })
                }
            })
            .collect()
    }

    /// Gradients of a scalar `out` with respect to `wrt`, without touching leaf accumulators.
    pub fn gradients(&self, out: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradients need a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        self.vjp(out, &Tensor::scalar(1.0), wrt)
    }

    /// Accumulates `d out / d leaf` into every trainable leaf.
    pub fn backward(&self, out: Var<'_>) -> Result<()> {
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let grads = self.sweep(out.id, &Tensor::scalar(1.0))?;
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::Numeric { op: "backward" });
            }
            match &mut nodes[id].grad {
                Some(existing) => existing.axpy(1.0, &g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn add_into(s: &mut [f64], g: &[f64], c: f64) {
    for (x, &v) in s.iter_mut().zip(g) {
        *x += c * v;
    }
}

fn bidx(bc: Bcast, i: usize, cols: usize) -> usize {
    match bc {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

/// Sums `f(g_i, i)` over the broadcast pattern into the second operand's gradient.
fn reduce_into(s: &mut [f64], g: &[f64], bc: Bcast, cols: usize, f: impl Fn(f64, usize) -> f64) {
    for (i, &gv) in g.iter().enumerate() {
        s[bidx(bc, i, cols)] += f(gv, i);
    }
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Bcast::Scalar);
    }
    let cols = a.cols();
    let rows = a.rows();
    let b_is_row = b.shape().len() == 1 || (b.shape().len() == 2 && b.shape()[0] == 1);
    if b_is_row && b.numel() == cols && a.shape().len() >= 1 {
        return Ok(Bcast::Row);
    }
    if b.shape().len() == 2 && b.shape()[1] == 1 && b.shape()[0] == rows && a.shape().len() == 2 {
        return Ok(Bcast::Col);
    }
    dim_err(
        op,
        format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()),
    )
}

fn zip_bcast(a: &Tensor, b: &Tensor, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[bidx(bc, i, cols)]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape as input")
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return dim_err(op, format!("expected a 2-D tensor, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.record(name, v, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Bcast) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let bc = broadcast(name, &a, &b)?;
        let v = zip_bcast(&a, &b, bc, f);
        self.tape.record(name, v, op(bc), &[self.id, other.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (n, k) = require_2d("matmul", &a)?;
        let (k2, m) = require_2d("matmul", &b)?;
        if k != k2 {
            return dim_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(a.data(), b.data(), &mut out, n, k, m);
        let v = Tensor::matrix(n, m, out)?;
        self.tape.record(
            "matmul",
            v,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// Elementwise sum; `other` may also be a scalar, a row vector or a column vector.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "add", |x, y| x + y, |bc| Op::Add(a, b, bc))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "sub", |x, y| x - y, |bc| Op::Sub(a, b, bc))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "mul", |x, y| x * y, |bc| Op::Mul(a, b, bc))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "div", |x, y| x / y, |bc| Op::Div(a, b, bc))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| c * x, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(self, c: f64) -> Result<Var<'t>> {
        self.unary("shift", |x| x + c, Op::Shift(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(self.id))
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, Op::Abs(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        self.unary("power", |x| x.powf(p), Op::Power(self.id, p))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Step function with H(0) = 0. Has no derivative; backward through it fails.
    pub fn heaviside(self) -> Result<Var<'t>> {
        self.unary("heaviside", step, Op::Heaviside)
    }

    /// Step function whose backward pass uses a box of width `eps` and height `1/eps`.
    pub fn heaviside_ste(self, eps: f64) -> Result<Var<'t>> {
        self.unary("heaviside", step, Op::HeavisideSte(self.id, eps))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let v = Tensor::new(a.shape().to_vec(), out)?;
        self.tape
            .record("softmax", v, Op::Softmax(self.id), &[self.id])
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layernorm(self) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        let mut out = a.data().to_vec();
        let mut inv = Vec::with_capacity(a.rows());
        for row in out.chunks_mut(cols.max(1)) {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * r);
            inv.push(r);
        }
        let v = Tensor::new(a.shape().to_vec(), out)?;
        self.tape
            .record("layernorm", v, Op::LayerNorm(self.id, inv), &[self.id])
    }

    /// Picks flat elements by index into a new tensor of `shape`; `None` yields 0.
    pub fn gather(self, idx: Vec<Option<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let a = self.value();
        let shape = shape.into();
        if shape.iter().product::<usize>() != idx.len() {
            return dim_err(
                "gather",
                format!("{} indices for shape {shape:?}", idx.len()),
            );
        }
        let mut out = Vec::with_capacity(idx.len());
        for i in &idx {
            match i {
                Some(j) if *j >= a.numel() => {
                    return dim_err("gather", format!("index {j} out of range {}", a.numel()))
                }
                Some(j) => out.push(a.data()[*j]),
                None => out.push(0.0),
            }
        }
        let v = Tensor::new(shape, out)?;
        self.tape
            .record("gather", v, Op::Gather(self.id, idx), &[self.id])
    }

    /// Builds a matrix from rows of a 2-D tensor; `None` yields a zero row.
    pub fn gather_rows(self, rows: &[Option<usize>]) -> Result<Var<'t>> {
        let a = self.value();
        let (n, c) = require_2d("gather", &a)?;
        let mut idx = Vec::with_capacity(rows.len() * c);
        for r in rows {
            match r {
                Some(r) if *r >= n => {
                    return dim_err("gather", format!("row {r} out of range {n}"))
                }
                Some(r) => idx.extend((0..c).map(|j| Some(r * c + j))),
                None => idx.extend(std::iter::repeat(None).take(c)),
            }
        }
        self.gather(idx, vec![rows.len(), c])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.record("sum", v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let a = self.value();
        let v = Tensor::scalar(a.sum() / a.numel() as f64);
        self.tape.record("mean", v, Op::Mean(self.id), &[self.id])
    }

    /// Sum over the last axis, shape `[rows, 1]`.
    pub fn row_sum(self) -> Result<Var<'t>> {
        let a = self.value();
        let c = a.cols();
        let out: Vec<f64> = a.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let v = Tensor::matrix(out.len(), 1, out)?;
        self.tape.record("sum", v, Op::RowSum(self.id), &[self.id])
    }

    /// Sum over rows, shape `[cols]`.
    pub fn col_sum(self) -> Result<Var<'t>> {
        let a = self.value();
        let c = a.cols();
        let mut out = vec![0.0; c];
        for (i, x) in a.data().iter().enumerate() {
            out[i % c] += x;
        }
        self.tape
            .record("sum", Tensor::vector(out), Op::ColSum(self.id), &[self.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transpose2()?;
        self.tape
            .record("transpose", v, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshaped(shape)?;
        self.tape
            .record("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (n, c) = require_2d("slice", &a)?;
        if start > end || end > c {
            return dim_err("slice", format!("columns {start}..{end} of {c}"));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&a.data()[r * c + start..r * c + end]);
        }
        let v = Tensor::matrix(n, w, out)?;
        self.tape
            .record("slice", v, Op::SliceCols(self.id, start), &[self.id])
    }

    /// Places 2-D tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = require_2d("concat", &vals[0])?.0;
        let mut total = 0;
        for v in &vals {
            let (r, c) = require_2d("concat", v)?;
            if r != rows {
                return dim_err("concat", format!("row counts {rows} and {r}"));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = Tensor::matrix(rows, total, out)?;
        tape.record("concat", v, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = require_2d("concat", &vals[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for v in &vals {
            let (r, c) = require_2d("concat", v)?;
            if c != cols {
                return dim_err("concat", format!("column counts {cols} and {c}"));
            }
            rows += r;
            out.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = Tensor::matrix(rows, cols, out)?;
        tape.record("concat", v, Op::ConcatRows(ids.clone()), &ids)
    }
}

fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Full Jacobian `∂f/∂x` with one row per output component, shape `[outputs, inputs]`.
pub fn jacobian<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let m = y.numel();
    let n = x.numel();
    let mut out = Vec::with_capacity(m * n);
    let mut seed = Tensor::zeros(vec![m]);
    for i in 0..m {
        seed.data_mut()[i] = 1.0;
        let g = tape.vjp(y, &seed, &[xv])?;
        out.extend_from_slice(g[0].data());
        seed.data_mut()[i] = 0.0;
    }
    Tensor::matrix(m, n, out)
}
