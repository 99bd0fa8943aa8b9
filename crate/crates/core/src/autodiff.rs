//! A minimal reverse-mode automatic-differentiation tape.
//!
//! Operations are recorded in creation order, so the node list is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//! Values are whole tensors; every op works at tensor granularity to keep the
//! tape short.
//!
//! Binary elementwise ops accept equal shapes or a one-element operand, which
//! is broadcast. There is no other broadcasting.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Min,
    Max,
}

const PAD: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Reshape(Var),
    AddRowBias(Var, Var),
    // Flat index of the selected input per output, `PAD` when the padding won.
    MorphPool(Var, Vec<u32>),
    ConvDw(Var, Var, Var),
    ConvPw(Var, Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the tape's `requires_grad` leaves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

// Index into a possibly broadcast operand.
#[inline]
fn at(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(value)?))
    }

    /// Value of a node. Panics if `v` came from a different, shorter tape.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.get(v)?.item()
    }

    fn get(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVar { id: v.0 })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, op, needs)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.get(a)?, self.get(b)?);
        let shape = broadcast_shape(name, ta, tb)?;
        let n = shape.iter().product::<usize>();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(at(da, i), at(db, i))).collect();
        let out = Tensor::from_op(name, shape, data)?;
        Ok(self.push_op(out, op, &[a, b]))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.get(x)?;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_op(name, t.shape().to_vec(), data)?;
        Ok(self.push_op(out, op, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient; a zero anywhere in the divisor is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.get(b)?.data().contains(&0.0) {
            return Err(Error::invalid("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Result<Var> {
        self.affine(x, -1.0, c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, math::sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, math::softplus, Op::Softplus(x))
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.get(x)?.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("ln", "non-positive input"));
        }
        self.unary("ln", x, math::ln, Op::Ln(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid("clamp", "lower bound exceeds upper bound"));
        }
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.get(a)?, self.get(b)?);
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (l, r) => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    left: l.to_vec(),
                    right: r.to_vec(),
                })
            }
        };
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let out = Tensor::from_op("matmul", vec![m, n], out)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.get(x)?.reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    /// Adds `b[i]` to every entry of row `i` of `x`; `x` is `[m, n]` or `[m]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.get(x)?, self.get(b)?);
        let m = tx.shape().first().copied().unwrap_or(0);
        if tx.rank() > 2 || tx.rank() == 0 || tb.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = tx.numel() / m;
        let (dx, db) = (tx.data(), tb.data());
        let data = (0..m * n).map(|i| dx[i] + db[i / n]).collect();
        let out = Tensor::from_op("add_row_bias", tx.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddRowBias(x, b), &[x, b]))
    }

    /// 3x3 sliding-window min or max with stride 1 over each plane of a
    /// `[C, H, W]` (or `[H, W]`) tensor. Off-image positions read as 0, so
    /// `morph_pool(Min, x) == -morph_pool(Max, -x)`. Ties go to the first
    /// position in row-major window order, and backward routes the gradient
    /// to that single position.
    pub fn morph_pool(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        let t = self.get(x)?;
        let (c, h, w) = planes(t, "morph_pool")?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        let mut arg = vec![PAD; src.len()];
        for ch in 0..c {
            let base = ch * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let mut best = 0.0;
                    let mut best_idx = PAD;
                    let mut first = true;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xs) = (y as i64 + dy, xx as i64 + dx);
                            let (v, idx) =
                                if yy < 0 || xs < 0 || yy >= h as i64 || xs >= w as i64 {
                                    (0.0, PAD)
                                } else {
                                    let i = base + yy as usize * w + xs as usize;
                                    (src[i], i as u32)
                                };
                            let better = match kind {
                                PoolKind::Max => v > best,
                                PoolKind::Min => v < best,
                            };
                            if first || better {
                                best = v;
                                best_idx = idx;
                                first = false;
                            }
                        }
                    }
                    out[base + y * w + xx] = best;
                    arg[base + y * w + xx] = best_idx;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push_op(out, Op::MorphPool(x, arg), &[x]))
    }

    pub fn erode(&mut self, x: Var) -> Result<Var> {
        self.morph_pool(PoolKind::Min, x)
    }

    pub fn dilate(&mut self, x: Var) -> Result<Var> {
        self.morph_pool(PoolKind::Max, x)
    }

    /// Per-channel 3x3 cross-correlation, stride 1, zero padding 1, plus a
    /// per-channel bias. `x: [C, H, W]`, `w: [C, 3, 3]`, `b: [C]`.
    pub fn conv_dw3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.get(x)?, self.get(w)?, self.get(b)?);
        let (c, h, wd) = tx.chw()?;
        if tw.shape() != [c, 3, 3] || tb.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "conv_dw3x3",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (src, k, bias) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            let plane = &src[ch * h * wd..(ch + 1) * h * wd];
            let dst = &mut out[ch * h * wd..(ch + 1) * h * wd];
            dst.iter_mut().for_each(|v| *v = bias[ch]);
            for ky in 0..3 {
                for kx in 0..3 {
                    let kv = k[ch * 9 + ky * 3 + kx];
                    for_each_tap(h, wd, ky, kx, |o, i| dst[o] += kv * plane[i]);
                }
            }
        }
        let out = Tensor::from_op("conv_dw3x3", tx.shape().to_vec(), out)?;
        Ok(self.push_op(out, Op::ConvDw(x, w, b), &[x, w, b]))
    }

    /// Per-pixel linear map across channels. `x: [C, H, W]`, `w: [C', C]`,
    /// `b: [C']`, result `[C', H, W]`.
    pub fn conv_pw1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.get(x)?, self.get(w)?, self.get(b)?);
        let (c, h, wd) = tx.chw()?;
        let co = match tw.shape() {
            &[co, ci] if ci == c && tb.shape() == [co] => co,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv_pw1x1",
                    left: tx.shape().to_vec(),
                    right: tw.shape().to_vec(),
                })
            }
        };
        let hw = h * wd;
        let mut out = matmul_raw(tw.data(), tx.data(), co, c, hw);
        for (o, row) in out.chunks_mut(hw).enumerate() {
            let bv = tb.data()[o];
            row.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::from_op("conv_pw1x1", vec![co, h, wd], out)?;
        Ok(self.push_op(out, Op::ConvPw(x, w, b), &[x, w, b]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = self.get(x)?;
        let s = t.data().iter().sum::<f64>();
        let out = Tensor::from_op("sum", Vec::new(), vec![s])?;
        Ok(self.push_op(out, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.get(x)?;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let out = Tensor::from_op("mean", Vec::new(), vec![s])?;
        Ok(self.push_op(out, Op::Mean(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Returns a gradient for every leaf
    /// that was added with `requires_grad` and that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.get(loss)?;
        if !root.is_scalar() {
            return Err(Error::NotScalar {
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                out.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let target = self.nodes[v.0].value.numel();
        // Broadcast operands collapse to a single summed entry.
        let contrib = if target == 1 && contrib.len() != 1 {
            vec![contrib.iter().sum()]
        } else {
            contrib
        };
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(a), val(b));
                if self.needs(a) {
                    let c = g.iter().enumerate().map(|(i, gi)| gi * at(db, i)).collect();
                    self.accumulate(grads, a, c);
                }
                if self.needs(b) {
                    let c = g.iter().enumerate().map(|(i, gi)| gi * at(da, i)).collect();
                    self.accumulate(grads, b, c);
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (val(a), val(b));
                if self.needs(a) {
                    let c = g.iter().enumerate().map(|(i, gi)| gi / at(db, i)).collect();
                    self.accumulate(grads, a, c);
                }
                if self.needs(b) {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            let d = at(db, i);
                            -gi * at(da, i) / (d * d)
                        })
                        .collect();
                    self.accumulate(grads, b, c);
                }
            }
            Op::Affine(x, scale) => {
                self.accumulate(grads, x, g.iter().map(|v| v * scale).collect());
            }
            Op::Relu(x) => {
                let c = g
                    .iter()
                    .zip(val(x))
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, c);
            }
            Op::Sigmoid(x) => {
                let c = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, s)| gi * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, x, c);
            }
            Op::Softplus(x) => {
                let c = g
                    .iter()
                    .zip(val(x))
                    .map(|(gi, &xi)| gi * math::sigmoid(xi))
                    .collect();
                self.accumulate(grads, x, c);
            }
            Op::Ln(x) => {
                let c = g.iter().zip(val(x)).map(|(gi, xi)| gi / xi).collect();
                self.accumulate(grads, x, c);
            }
            Op::Clamp(x, lo, hi) => {
                let c = g
                    .iter()
                    .zip(val(x))
                    .map(|(gi, &xi)| if xi > lo && xi < hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, c);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(a) {
                    // g [m, n] * b^T [n, k]
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] = dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    // a^T [k, m] * g [m, n]
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av != 0.0 {
                                axpy(av, grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, x, g.to_vec());
                if self.needs(b) {
                    let m = self.nodes[b.0].value.numel();
                    let n = g.len() / m;
                    let gb = g.chunks(n).map(|row| row.iter().sum()).collect();
                    self.accumulate(grads, b, gb);
                }
            }
            Op::MorphPool(x, ref arg) => {
                let mut gx = vec![0.0; g.len()];
                for (gi, &src) in g.iter().zip(arg) {
                    if src != PAD {
                        gx[src as usize] += gi;
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::ConvDw(x, w, b) => {
                let tx = &self.nodes[x.0].value;
                let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let hw = h * wd;
                let k = self.nodes[w.0].value.data();
                if self.needs(x) {
                    let mut gx = vec![0.0; g.len()];
                    for ch in 0..c {
                        let go = &g[ch * hw..(ch + 1) * hw];
                        let dst = &mut gx[ch * hw..(ch + 1) * hw];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let kv = k[ch * 9 + ky * 3 + kx];
                                for_each_tap(h, wd, ky, kx, |o, i| dst[i] += kv * go[o]);
                            }
                        }
                    }
                    self.accumulate(grads, x, gx);
                }
                if self.needs(w) {
                    let mut gw = vec![0.0; c * 9];
                    for ch in 0..c {
                        let go = &g[ch * hw..(ch + 1) * hw];
                        let plane = &tx.data()[ch * hw..(ch + 1) * hw];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let mut acc = 0.0;
                                for_each_tap(h, wd, ky, kx, |o, i| acc += go[o] * plane[i]);
                                gw[ch * 9 + ky * 3 + kx] = acc;
                            }
                        }
                    }
                    self.accumulate(grads, w, gw);
                }
                if self.needs(b) {
                    let gb = g.chunks(hw).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, b, gb);
                }
            }
            Op::ConvPw(x, w, b) => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (co, ci) = (tw.shape()[0], tw.shape()[1]);
                let hw = tx.numel() / ci;
                if self.needs(x) {
                    // w^T [ci, co] * g [co, hw]
                    let mut gx = vec![0.0; ci * hw];
                    for o in 0..co {
                        let grow = &g[o * hw..(o + 1) * hw];
                        for i in 0..ci {
                            let wv = tw.data()[o * ci + i];
                            if wv != 0.0 {
                                axpy(wv, grow, &mut gx[i * hw..(i + 1) * hw]);
                            }
                        }
                    }
                    self.accumulate(grads, x, gx);
                }
                if self.needs(w) {
                    // g [co, hw] * x^T [hw, ci]
                    let mut gw = vec![0.0; co * ci];
                    for o in 0..co {
                        let grow = &g[o * hw..(o + 1) * hw];
                        for i in 0..ci {
                            gw[o * ci + i] = dot(grow, &tx.data()[i * hw..(i + 1) * hw]);
                        }
                    }
                    self.accumulate(grads, w, gw);
                }
                if self.needs(b) {
                    let gb = g.chunks(hw).map(|p| p.iter().sum()).collect();
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, x, vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn planes(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::BadShape {
            op,
            shape: t.shape().to_vec(),
        }),
    }
}

// Visits (output index, input index) pairs of one 3x3 tap with zero padding.
#[inline]
fn for_each_tap(h: usize, w: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
    let y0 = if ky == 0 { 1 } else { 0 };
    let y1 = if ky == 2 { h.saturating_sub(1) } else { h };
    let x0 = if kx == 0 { 1 } else { 0 };
    let x1 = if kx == 2 { w.saturating_sub(1) } else { w };
    for y in y0..y1 {
        let iy = y + ky - 1;
        for x in x0..x1 {
            f(y * w + x, iy * w + x + kx - 1);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
    out
}
