//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output value and the data
//! its backward rule needs. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and backward is a single
//! reverse sweep.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::metrics;
use crate::tensor::{self, ConvGeom, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Reshape(Var),
    SoftmaxLast { a: Var, t: f64 },
    MaskedRowSoftmax { a: Var },
    CrossEntropy { logits: Var, labels: Rc<[usize]> },
    EmRows { eta: Var, mu: Rc<[f64]>, spacing: f64 },
    Mmd { x: Var, y: Rc<Tensor>, bandwidth: f64 },
    SumAll(Var),
    MeanAll(Var),
    SumAxis0(Var),
    SumLast(Var),
    MeanAxis1(Var),
    GlobalAvgPool(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus, after [`Tape::backward`], the gradients of
/// every node that depends on a trainable leaf.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check(v).ok()?;
        self.grads.get(v.id)?.as_deref()
    }

    /// Clears gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::DetachedVar(v.id));
        }
        Ok(v.id)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, tape: self.id }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a)?.shape(), self.val(b)?.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.val(a)?.map(f);
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * k, Op::Scale(a, k))
    }

    /// Adds `b[c]` along axis 1 of `x[n, c, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x)?, self.val(b)?);
        if tx.ndim() < 2 || tb.ndim() != 1 || tx.shape()[1] != tb.len() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let c = tb.len();
        let inner: usize = tx.shape()[2..].iter().product();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % c];
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a)?.matmul(self.val(b)?)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Cross-correlation of `x[n, c_in, h, w]` with `k[c_out, c_in, kh, kw]`,
    /// zero padding on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tk) = (self.val(x)?, self.val(k)?);
        let geom = ConvGeom::new(tx.shape(), tk.shape(), stride, pad)?;
        let data = tensor::conv2d_forward(tx.data(), tk.data(), &geom);
        let out = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h(), geom.out_w()], data)?;
        self.push("conv2d", out, Op::Conv2d { x, k, geom }, &[x, k])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + math::exp(-x)), Op::Sigmoid(a))
    }

    /// 2×2 average pooling with stride 2 over the last two axes.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a)?;
        let s = ta.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(invalid("avg_pool2 needs [n, c, even h, even w]"));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &ta.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    dst[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push("avg_pool2", out, Op::AvgPool2(a), &[a])
    }

    /// Nearest-neighbour 2× upsampling over the last two axes.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a)?;
        let s = ta.shape();
        if s.len() != 4 {
            return Err(invalid("upsample2 needs [n, c, h, w]"));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &ta.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push("upsample2", out, Op::Upsample2(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a)?.clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Softmax over the last axis of `a / t`.
    pub fn softmax_last(&mut self, a: Var, t: f64) -> Result<Var> {
        let out = self.val(a)?.softmax_last(t)?;
        self.push("softmax", out, Op::SoftmaxLast { a, t }, &[a])
    }

    /// Row softmax of a square matrix restricted to `mask`; masked entries
    /// are exactly zero and rows without any allowed entry are all zero.
    pub fn masked_row_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.val(a)?;
        if ta.ndim() != 2 || mask.len() != ta.len() {
            return Err(Error::LengthMismatch {
                op: "masked_row_softmax",
                expected: ta.len(),
                actual: mask.len(),
            });
        }
        let cols = ta.shape()[1];
        let mut out = vec![0.0; ta.len()];
        for (r, orow) in out.chunks_mut(cols).enumerate() {
            let row = &ta.data()[r * cols..(r + 1) * cols];
            let m = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for ((o, &v), &on) in orow.iter_mut().zip(row).zip(m) {
                if on {
                    *o = math::exp(v - max);
                    z += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= z);
        }
        let out = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(
            "masked_row_softmax",
            out,
            Op::MaskedRowSoftmax { a },
            &[a],
        )
    }

    /// Per-row cross-entropy `-log softmax(logits)[label]`, shape `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.val(logits)?;
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::LengthMismatch {
                op: "cross_entropy",
                expected: t.shape()[0],
                actual: labels.len(),
            });
        }
        let c = t.shape()[1];
        let mut out = Vec::with_capacity(labels.len());
        for (row, &y) in t.data().chunks(c).zip(labels) {
            out.push(metrics::cross_entropy(row, y)?);
        }
        let out = Tensor::from_vec(out);
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
            },
            &[logits],
        )
    }

    /// Per-row closed-form 1-D Earth-Mover distance between fixed target
    /// distributions `mu` (row-major `[n, c]`) and the rows of `eta`, with
    /// bins `spacing` apart. Shape `[n]`.
    pub fn em_rows(&mut self, eta: Var, mu: &[f64], spacing: f64) -> Result<Var> {
        let t = self.val(eta)?;
        if t.ndim() != 2 || t.len() != mu.len() {
            return Err(Error::LengthMismatch {
                op: "em_rows",
                expected: t.len(),
                actual: mu.len(),
            });
        }
        let c = t.shape()[1];
        let out: Vec<f64> = t
            .data()
            .chunks(c)
            .zip(mu.chunks(c))
            .map(|(e, m)| spacing * metrics::em_cumsum_l1(m, e))
            .collect();
        let out = Tensor::from_vec(out);
        self.push(
            "em_rows",
            out,
            Op::EmRows {
                eta,
                mu: mu.into(),
                spacing,
            },
            &[eta],
        )
    }

    /// Gaussian-kernel MMD between per-sample channel sets.
    ///
    /// `x` is `[b, cs, s]` (already normalized student channels), `y` is a
    /// constant `[b, k, ck, s]` holding `k` target channel sets per sample.
    /// Output is `[b, k]`.
    pub fn mmd(&mut self, x: Var, y: Tensor, bandwidth: f64) -> Result<Var> {
        let tx = self.val(x)?;
        let (xs, ys) = (tx.shape(), y.shape());
        if xs.len() != 3 || ys.len() != 4 || xs[0] != ys[0] || xs[2] != ys[3] {
            return Err(Error::ShapeMismatch {
                op: "mmd",
                lhs: xs.to_vec(),
                rhs: ys.to_vec(),
            });
        }
        if !(bandwidth > 0.0) {
            return Err(invalid("mmd bandwidth must be positive"));
        }
        let (b, cs, s, k, ck) = (xs[0], xs[1], xs[2], ys[1], ys[2]);
        let mut out = vec![0.0; b * k];
        for i in 0..b {
            let xi = &tx.data()[i * cs * s..(i + 1) * cs * s];
            for j in 0..k {
                let off = (i * k + j) * ck * s;
                let yj = &y.data()[off..off + ck * s];
                out[i * k + j] = metrics::mmd_kernel_value(xi, yj, s, bandwidth);
            }
        }
        let out = Tensor::new(vec![b, k], out)?;
        let y = Rc::new(y);
        self.push("mmd", out, Op::Mmd { x, y, bandwidth }, &[x])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.val(a)?.sum());
        self.push("sum_all", out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean_all", out, Op::MeanAll(a), &[a])
    }

    /// Column sums of a 2-D tensor, shape `[cols]`.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        if t.ndim() != 2 {
            return Err(invalid("sum_axis0 needs a 2-D tensor"));
        }
        let cols = t.shape()[1];
        let mut out = vec![0.0; cols];
        for row in t.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::from_vec(out);
        self.push("sum_axis0", out, Op::SumAxis0(a), &[a])
    }

    /// Sum over the last axis; the axis is dropped (a 1-D input gives `[1]`).
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        let s = t.shape();
        let c = *s.last().expect("non-empty shape");
        let out: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let shape = if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() };
        let out = Tensor::new(shape, out)?;
        self.push("sum_last", out, Op::SumLast(a), &[a])
    }

    /// Mean over axis 1 of `[a, b, c]`, giving `[a, c]`.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        let s = t.shape();
        if s.len() != 3 {
            return Err(invalid("mean_axis1 needs a 3-D tensor"));
        }
        let (n, m, c) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..m {
                let src = &t.data()[(i * m + j) * c..(i * m + j + 1) * c];
                for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *o += v / m as f64;
                }
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        self.push("mean_axis1", out, Op::MeanAxis1(a), &[a])
    }

    /// `[n, c, h, w]` → `[n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a)?;
        let s = t.shape();
        if s.len() != 4 {
            return Err(invalid("global_avg_pool needs [n, c, h, w]"));
        }
        let plane = s[2] * s[3];
        let out: Vec<f64> = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], out)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(a), &[a])
    }

    /// Concatenates 2-D tensors with equal row counts along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let rows = self.val(parts[0])?.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p)?.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.id].value;
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.val(a)?;
        let s = t.shape();
        if s.len() != 2 || start + width > s[1] || width == 0 {
            return Err(invalid("slice_cols needs a 2-D tensor and an in-range column window"));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * cols + start..r * cols + start + width]);
        }
        let out = Tensor::new(vec![rows, width], out)?;
        self.push("slice_cols", out, Op::SliceCols { a, start }, &[a])
    }

    /// Populates gradients of `loss` with respect to every node that depends
    /// on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let id = self.check(loss)?;
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        let shape = self.nodes[id].value.shape();
        if self.nodes[id].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backpropagated = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[id].requires_grad {
            return Ok(());
        }
        self.grads[id] = Some(vec![1.0]);
        for i in (0..=id).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.id].requires_grad {
            return;
        }
        match &mut self.grads[v.id] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.nodes[b.id].value.data();
                    let ga = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let av = self.nodes[a.id].value.data();
                    let gb = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(a, k) => self.accumulate(a, g.iter().map(|v| v * k).collect()),
            Op::AddBias(x, b) => {
                self.accumulate(x, g.to_vec());
                if self.needs(b) {
                    let s = self.nodes[x.id].value.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (j, v) in g.iter().enumerate() {
                        gb[(j / inner) % c] += v;
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (
                    self.nodes[a.id].value.shape().to_vec(),
                    self.nodes[b.id].value.shape().to_vec(),
                );
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    tensor::gemm_nt(g, self.nodes[b.id].value.data(), &mut ga, m, n, k);
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    tensor::gemm_tn(self.nodes[a.id].value.data(), g, &mut gb, m, k, n);
                    self.accumulate(b, gb);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = tensor::conv2d_backward(
                    self.nodes[x.id].value.data(),
                    self.nodes[k.id].value.data(),
                    g,
                    &geom,
                    self.needs(x),
                    self.needs(k),
                );
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(k, dk);
                }
            }
            Op::Relu(a) => {
                let av = self.nodes[a.id].value.data();
                let ga = g
                    .iter()
                    .zip(av)
                    .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data();
                let ga = g.iter().zip(yv).map(|(&d, &y)| d * y * (1.0 - y)).collect();
                self.accumulate(a, ga);
            }
            Op::AvgPool2(a) => {
                let s = self.nodes[a.id].value.shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut ga = vec![0.0; s.iter().product()];
                for p in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for x in 0..ow {
                            let d = 0.25 * g[p * oh * ow + y * ow + x];
                            let base = p * h * w + 2 * y * w + 2 * x;
                            ga[base] += d;
                            ga[base + 1] += d;
                            ga[base + w] += d;
                            ga[base + w + 1] += d;
                        }
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Upsample2(a) => {
                let s = self.nodes[a.id].value.shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let ow = 2 * w;
                let mut ga = vec![0.0; s.iter().product()];
                for p in 0..s[0] * s[1] {
                    for y in 0..2 * h {
                        for x in 0..ow {
                            ga[p * h * w + (y / 2) * w + x / 2] += g[p * 4 * h * w + y * ow + x];
                        }
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Reshape(a) => self.accumulate(a, g.to_vec()),
            Op::SoftmaxLast { a, t } => {
                let y = &self.nodes[i].value;
                let c = *y.shape().last().expect("shape");
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gy), &yy) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yy * (gy - s) / t;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::MaskedRowSoftmax { a, .. } => {
                // Masked entries have y = 0 and therefore get zero gradient.
                let y = &self.nodes[i].value;
                let c = y.shape()[1];
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gy), &yy) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yy * (gy - s);
                    }
                }
                self.accumulate(a, ga);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = &self.nodes[logits.id].value;
                let c = t.shape()[1];
                let mut ga = vec![0.0; t.len()];
                for (r, (row, out)) in t.data().chunks(c).zip(ga.chunks_mut(c)).enumerate() {
                    out.copy_from_slice(row);
                    tensor::softmax_in_place(out, 1.0);
                    out[labels[r]] -= 1.0;
                    out.iter_mut().for_each(|v| *v *= g[r]);
                }
                self.accumulate(logits, ga);
            }
            Op::EmRows { eta, mu, spacing } => {
                let t = &self.nodes[eta.id].value;
                let c = t.shape()[1];
                let mut ga = vec![0.0; t.len()];
                for (r, out) in ga.chunks_mut(c).enumerate() {
                    let e = &t.data()[r * c..(r + 1) * c];
                    let m = &mu[r * c..(r + 1) * c];
                    metrics::em_cumsum_l1_grad_eta(m, e, out);
                    out.iter_mut().for_each(|v| *v *= spacing * g[r]);
                }
                self.accumulate(eta, ga);
            }
            Op::Mmd { x, y, bandwidth } => {
                let tx = &self.nodes[x.id].value;
                let (xs, ys) = (tx.shape(), y.shape());
                let (b, cs, s, k, ck) = (xs[0], xs[1], xs[2], ys[1], ys[2]);
                let mut gx = vec![0.0; tx.len()];
                for bi in 0..b {
                    let xi = &tx.data()[bi * cs * s..(bi + 1) * cs * s];
                    let out = &mut gx[bi * cs * s..(bi + 1) * cs * s];
                    for j in 0..k {
                        let off = (bi * k + j) * ck * s;
                        let yj = &y.data()[off..off + ck * s];
                        metrics::mmd_kernel_grad_x(xi, yj, s, bandwidth, g[bi * k + j], out);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.id].value.len();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.id].value.len();
                self.accumulate(a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis0(a) => {
                let s = self.nodes[a.id].value.shape();
                let (rows, cols) = (s[0], s[1]);
                let mut ga = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    ga.extend_from_slice(g);
                }
                self.accumulate(a, ga);
            }
            Op::SumLast(a) => {
                let t = &self.nodes[a.id].value;
                let c = *t.shape().last().expect("shape");
                let ga = (0..t.len()).map(|j| g[j / c]).collect();
                self.accumulate(a, ga);
            }
            Op::MeanAxis1(a) => {
                let s = self.nodes[a.id].value.shape().to_vec();
                let (n, m, c) = (s[0], s[1], s[2]);
                let mut ga = vec![0.0; n * m * c];
                for ii in 0..n {
                    for j in 0..m {
                        for q in 0..c {
                            ga[(ii * m + j) * c + q] = g[ii * c + q] / m as f64;
                        }
                    }
                }
                self.accumulate(a, ga);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.nodes[a.id].value.shape();
                let plane = s[2] * s[3];
                let n: usize = s.iter().product();
                let ga = (0..n).map(|j| g[j / plane] / plane as f64).collect();
                self.accumulate(a, ga);
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.shape()[1];
                let rows = self.nodes[i].value.shape()[0];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.id].value.shape()[1];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let s = self.nodes[a.id].value.shape();
                let (rows, cols) = (s[0], s[1]);
                let width = self.nodes[i].value.shape()[1];
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    ga[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.accumulate(a, ga);
            }
        }
    }
}
