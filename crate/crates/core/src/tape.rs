//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in execution
//! order, which is already a topological order. [`Tape::backward`] walks the
//! record once in reverse and returns gradients for every leaf. A tape is
//! single-use: build a fresh one for each forward pass.
//!
//! ```
//! use unvp::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{col2im_add, gemm, im2col, ConvGeom, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
    /// Zero padding of `kernel / 2` on each side (odd kernels only); output keeps the input size.
    Same,
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MaskMul(usize, Tensor),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of primitive operations for one forward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(tape {}, node {})", self.tape.id, self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            spent: Cell::new(false),
        }
    }

    /// A differentiable input (parameter or sample).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Propagates gradients from the scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was recorded on a different tape".into()));
        }
        if self.spent.get() {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.spent.set(true);

        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf => Some(
                    grads[i]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape_id: self.id,
            leaves,
        })
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients {
    tape_id: u64,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Result<&Tensor> {
        if var.tape.id != self.tape_id {
            return Err(Error::MissingGradient(var.id));
        }
        self.leaves
            .get(var.id)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingGradient(var.id))
    }
}

fn accumulate<'g>(
    grads: &'g mut [Option<Tensor>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(nodes[id].value.shape()));
    }
    slot.as_mut().map(|t| t.data_mut())
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            for &(src, sign) in &[(*a, 1.0), (*b, 1.0)] {
                if let Some(d) = accumulate(grads, nodes, src) {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += sign * g);
                }
            }
        }
        Op::Sub(a, b) => {
            for &(src, sign) in &[(*a, 1.0), (*b, -1.0)] {
                if let Some(d) = accumulate(grads, nodes, src) {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += sign * g);
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    d[i] += gd[i] * vb[i];
                }
            }
            if let Some(d) = accumulate(grads, nodes, *b) {
                for i in 0..d.len() {
                    d[i] += gd[i] * va[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                d.iter_mut().zip(gd).for_each(|(d, g)| *d += s * g);
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
            }
        }
        Op::MaskMul(a, mask) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                let m = mask.data();
                for i in 0..d.len() {
                    d[i] += gd[i] * m[i];
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(d) = accumulate(grads, nodes, *x) {
                d.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = accumulate(grads, nodes, *b) {
                let n = d.len();
                for row in gd.chunks_exact(n) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let va = nodes[*a].value.data();
            let vb = nodes[*b].value.data();
            if let Some(d) = accumulate(grads, nodes, *a) {
                gemm(m, n, k, gd, false, vb, true, d, true);
            }
            if let Some(d) = accumulate(grads, nodes, *b) {
                gemm(k, m, n, va, true, gd, false, d, true);
            }
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            batch,
            out_channels,
            cols,
        } => {
            let (l, p) = (geom.patch_len(), geom.positions());
            let co = *out_channels;
            let img_len = geom.channels * geom.height * geom.width;
            if let Some(d) = accumulate(grads, nodes, *kernel) {
                for i in 0..*batch {
                    let gi = &gd[i * co * p..(i + 1) * co * p];
                    let ci = &cols[i * l * p..(i + 1) * l * p];
                    gemm(co, p, l, gi, false, ci, true, d, true);
                }
            }
            if let Some(b) = bias {
                if let Some(d) = accumulate(grads, nodes, *b) {
                    for i in 0..*batch {
                        for (c, dc) in d.iter_mut().enumerate() {
                            let off = (i * co + c) * p;
                            *dc += gd[off..off + p].iter().sum::<f64>();
                        }
                    }
                }
            }
            let kv = nodes[*kernel].value.data();
            if let Some(d) = accumulate(grads, nodes, *input) {
                let mut dcols = vec![0.0; l * p];
                for i in 0..*batch {
                    let gi = &gd[i * co * p..(i + 1) * co * p];
                    gemm(l, co, p, kv, true, gi, false, &mut dcols, false);
                    col2im_add(&dcols, geom, &mut d[i * img_len..(i + 1) * img_len]);
                }
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(d) = accumulate(grads, nodes, *input) {
                for (j, &src) in argmax.iter().enumerate() {
                    d[src] += gd[j];
                }
            }
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    if x[i] >= 0.0 {
                        d[i] += gd[i];
                    }
                }
            }
        }
        Op::Tanh(a) => {
            let y = out.data();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    d[i] += gd[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Exp(a) => {
            let y = out.data();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    d[i] += gd[i] * y[i];
                }
            }
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for i in 0..d.len() {
                    d[i] += gd[i] / x[i];
                }
            }
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        d[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            if let Some(d) = accumulate(grads, nodes, *a) {
                for r in 0..y.len() / n {
                    let gr = &gd[r * n..(r + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] += gr[j] - y[r * n + j].exp() * total;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                d.iter_mut().for_each(|d| *d += gd[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                let s = gd[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumLast(a) => {
            if let Some(d) = accumulate(grads, nodes, *a) {
                let n = d.len() / gd.len();
                for (row, g) in d.chunks_exact_mut(n).zip(gd) {
                    row.iter_mut().for_each(|d| *d += g);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &src in inputs {
                let width = nodes[src].value.shape()[*axis] * inner;
                if let Some(d) = accumulate(grads, nodes, src) {
                    for o in 0..outer {
                        let from = &gd[o * total + offset..o * total + offset + width];
                        d[o * width..(o + 1) * width]
                            .iter_mut()
                            .zip(from)
                            .for_each(|(d, g)| *d += g);
                    }
                }
                offset += width;
            }
        }
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// A copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    /// The value of a one-element var.
    pub fn item(&self) -> Result<f64> {
        self.tape.value_of(self.id).item()
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op}: operands live on different tapes")))
        }
    }

    fn unary(self, op: &'static str, f: impl Fn(f64) -> f64, node: Op) -> Result<Var<'t>> {
        let value = finite(op, self.tape.value_of(self.id).map(f))?;
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, node, needs))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other, op)?;
        let value = {
            let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op,
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            finite(op, Tensor::new(a.shape().to_vec(), data)?)?
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        Ok(self.tape.push(value, node, needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| v * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + s, Op::AddScalar(self.id))
    }

    /// Hadamard product with a fixed (non-differentiable) mask of the same shape.
    pub fn mask_mul(self, mask: &Tensor) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.id);
            if a.shape() != mask.shape() {
                return Err(Error::Shape {
                    op: "mask_mul",
                    left: a.shape().to_vec(),
                    right: mask.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
            finite("mask_mul", Tensor::new(a.shape().to_vec(), data)?)?
        };
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, Op::MaskMul(self.id, mask.clone()), needs))
    }

    /// Adds a vector along the last axis, broadcasting over every leading index.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias, "add_bias")?;
        let value = {
            let (x, b) = (self.tape.value_of(self.id), self.tape.value_of(bias.id));
            if b.rank() != 1 || x.shape().last() != Some(&b.len()) {
                return Err(Error::Shape {
                    op: "add_bias",
                    left: x.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(b.len()) {
                row.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
            }
            finite("add_bias", out)?
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(bias.id);
        Ok(self.tape.push(value, Op::AddBias(self.id, bias.id), needs))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let value = {
            let (a, b) = (self.tape.value_of(self.id), self.tape.value_of(other.id));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Tensor::zeros(&[m, n]);
            gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
            finite("matmul", out)?
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    /// Stride-1 convolution of a `[batch, c_in, h, w]` input with a
    /// `[c_out, c_in, k, k]` kernel and optional `[c_out]` bias.
    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(&kernel, "conv2d")?;
        if let Some(b) = &bias {
            self.same_tape(b, "conv2d")?;
        }
        let (value, geom, cols, batch, co) = {
            let x = self.tape.value_of(self.id);
            let kv = self.tape.value_of(kernel.id);
            let (xs, ks) = (x.shape(), kv.shape());
            let mismatch = || Error::Shape {
                op: "conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            };
            if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] {
                return Err(mismatch());
            }
            let k = ks[2];
            let pad = match padding {
                Padding::Valid => 0,
                Padding::Same if k % 2 == 1 => k / 2,
                Padding::Same => return Err(mismatch()),
            };
            if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
                return Err(mismatch());
            }
            let geom = ConvGeom {
                channels: xs[1],
                height: xs[2],
                width: xs[3],
                kernel: k,
                pad,
                out_h: xs[2] + 2 * pad - k + 1,
                out_w: xs[3] + 2 * pad - k + 1,
            };
            let (batch, co) = (xs[0], ks[0]);
            let bias_val = match &bias {
                Some(b) => {
                    let bv = self.tape.value_of(b.id);
                    if bv.shape() != [co] {
                        return Err(Error::Shape {
                            op: "conv2d",
                            left: ks.to_vec(),
                            right: bv.shape().to_vec(),
                        });
                    }
                    Some(bv.data().to_vec())
                }
                None => None,
            };
            let (l, p) = (geom.patch_len(), geom.positions());
            let img_len = geom.channels * geom.height * geom.width;
            let mut cols = vec![0.0; batch * l * p];
            let mut out = Tensor::zeros(&[batch, co, geom.out_h, geom.out_w]);
            for i in 0..batch {
                let ci = &mut cols[i * l * p..(i + 1) * l * p];
                im2col(&x.data()[i * img_len..(i + 1) * img_len], &geom, ci);
                let oi = &mut out.data_mut()[i * co * p..(i + 1) * co * p];
                gemm(co, l, p, kv.data(), false, ci, false, oi, false);
                if let Some(bv) = &bias_val {
                    for (c, row) in oi.chunks_exact_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
            (finite("conv2d", out)?, geom, cols, batch, co)
        };
        let needs = self.tape.needs(self.id)
            || self.tape.needs(kernel.id)
            || bias.is_some_and(|b| self.tape.needs(b.id));
        // Columns are only consumed by the kernel gradient.
        let cols = if self.tape.needs(kernel.id) { cols } else { Vec::new() };
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
                batch,
                out_channels: co,
                cols,
            },
            needs,
        ))
    }

    /// 2×2 max-pool with stride 2 over the last two axes of a rank-4 input.
    /// Odd trailing rows/columns are dropped.
    pub fn max_pool2(self) -> Result<Var<'t>> {
        let (value, argmax) = {
            let x = self.tape.value_of(self.id);
            let s = x.shape();
            if s.len() != 4 || s[2] < 2 || s[3] < 2 {
                return Err(Error::Shape {
                    op: "max_pool2",
                    left: s.to_vec(),
                    right: vec![2, 2],
                });
            }
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
            let mut argmax = Vec::with_capacity(out.len());
            let xd = x.data();
            let od = out.data_mut();
            let mut j = 0;
            for plane in 0..s[0] * s[1] {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        od[j] = xd[best];
                        argmax.push(best);
                        j += 1;
                    }
                }
            }
            (out, argmax)
        };
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, Op::MaxPool2 { input: self.id, argmax }, needs))
    }

    /// Rectifier. The derivative at exactly zero is taken as 1.
    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(self) -> Result<Var<'t>> {
        if self.tape.value_of(self.id).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    fn rowwise(self, op: &'static str, node: Op, log: bool) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let n = *x.shape().last().unwrap_or(&1);
            let mut out = x.clone();
            for row in out.data_mut().chunks_exact_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                for v in row.iter_mut() {
                    *v = if log { *v - lse } else { (*v - lse).exp() };
                }
            }
            finite(op, out)?
        };
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, node, needs))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.rowwise("softmax", Op::Softmax(self.id), false)
    }

    /// Log-softmax along the last axis, stabilized by log-sum-exp.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.rowwise("log_softmax", Op::LogSoftmax(self.id), true)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let value = finite(
            "sum",
            Tensor::scalar(self.tape.value_of(self.id).data().iter().sum()),
        )?;
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, Op::Sum(self.id), needs))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            finite("mean", Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))?
        };
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, Op::Mean(self.id), needs))
    }

    /// Sums out the last axis: `[.., n] → [..]` (a rank-1 input becomes a scalar).
    pub fn sum_last(self) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value_of(self.id);
            let s = x.shape();
            let Some(&n) = s.last() else {
                return Err(Error::Shape {
                    op: "sum_last",
                    left: vec![],
                    right: vec![],
                });
            };
            let data = x.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
            finite("sum_last", Tensor::new(s[..s.len() - 1].to_vec(), data)?)?
        };
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, Op::SumLast(self.id), needs))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value_of(self.id).clone().reshape(shape)?;
        let needs = self.tape.needs(self.id);
        Ok(self.tape.push(value, Op::Reshape(self.id), needs))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        for p in parts {
            first.same_tape(p, "concat")?;
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| tape.value_of(p.id)).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::Shape {
                    op: "concat",
                    left: base,
                    right: vec![axis],
                });
            }
            let mut shape = base.clone();
            shape[axis] = 0;
            for v in &vals {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::Shape {
                        op: "concat",
                        left: base.clone(),
                        right: s.to_vec(),
                    });
                }
                shape[axis] += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in &vals {
                    let w = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::new(shape, data)?
        };
        let needs = parts.iter().any(|p| tape.needs(p.id));
        Ok(tape.push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            needs,
        ))
    }
}
