//! Reverse-mode differentiation over a linear tape of primitive operations.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for accumulating adjoints. Parameters are borrowed,
//! never copied, and appear at most once per tape.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::fft::Fft2d;
use crate::image::ImageBuffer;
use crate::spectral::{self, FreqMask, PHASE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub enum Op {
    /// Differentiable leaf; its gradient is reported.
    Input,
    /// Leaf treated as a constant.
    Constant,
    Param(usize),
    /// Stride-1 convolution with zero "same" padding.
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId> },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize },
    Silu(NodeId),
    /// 2×2 mean pooling; odd trailing rows/columns are dropped.
    AvgPool2(NodeId),
    /// Nearest-neighbour ×2 upsampling.
    Upsample2(NodeId),
    /// Channel concatenation.
    Concat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `ka·a + kb·b`.
    Axpby { a: NodeId, ka: f64, b: NodeId, kb: f64 },
    /// Feature map plus a per-channel vector.
    AddChannel { x: NodeId, v: NodeId },
    /// `w·x + b` for vector `x`.
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Abs(NodeId),
    /// Elementwise clamp to `[lo, hi]`; the gradient passes strictly inside.
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// Mean of all elements, as a scalar.
    Mean(NodeId),
    /// Separable per-channel filter, "valid" positions only.
    Filter { x: NodeId, kernel: Vec<f64> },
    /// Amplitude fusion with a fixed forward branch; differentiable in `reverse`.
    Fwm { reverse: NodeId, forward: Box<ImageBuffer>, mask: Box<FreqMask> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded computation. `'p` borrows the parameter tensors.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [Tensor],
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    /// Tape without parameters (losses, gradient checks of primitives).
    pub fn detached() -> Tape<'static> {
        Tape::new(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(i) => &self.params[i],
            _ => &self.nodes[id.0].value,
        }
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push_value(Op::Input, t)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_value(Op::Constant, t)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        let id = self.push_value(Op::Param(index), Tensor::zeros(&[0]));
        self.param_nodes[index] = Some(id);
        id
    }

    fn push_value(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on current node values and records it.
    pub fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        Ok(self.push_value(op, value))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.push(Op::Conv2d { x, w, b })
    }
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> Result<NodeId> {
        self.push(Op::GroupNorm { x, gamma, beta, groups })
    }
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Silu(x))
    }
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::AvgPool2(x))
    }
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Upsample2(x))
    }
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Concat(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div(a, b))
    }
    pub fn axpby(&mut self, a: NodeId, ka: f64, b: NodeId, kb: f64) -> Result<NodeId> {
        self.push(Op::Axpby { a, ka, b, kb })
    }
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.push(Op::AddChannel { x, v })
    }
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Linear { x, w, b })
    }
    pub fn scale(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.push(Op::Scale(x, k))
    }
    pub fn offset(&mut self, x: NodeId, k: f64) -> Result<NodeId> {
        self.push(Op::Offset(x, k))
    }
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(x))
    }
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.push(Op::Clamp { x, lo, hi })
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }
    pub fn filter(&mut self, x: NodeId, kernel: Vec<f64>) -> Result<NodeId> {
        self.push(Op::Filter { x, kernel })
    }
    pub fn fwm(&mut self, reverse: NodeId, forward: ImageBuffer, mask: FreqMask) -> Result<NodeId> {
        self.push(Op::Fwm {
            reverse,
            forward: Box::new(forward),
            mask: Box::new(mask),
        })
    }

    fn same_dims(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).dims != self.value(b).dims {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.value(a).dims,
                self.value(b).dims
            )));
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_dims(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        Ok(Tensor::new(
            va.dims.clone(),
            va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.dims.clone(), v.data.iter().map(|&x| f(x)).collect())
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        Ok(match op {
            Op::Input | Op::Constant | Op::Param(_) => {
                return Err(Error::Tape("leaves carry their own values".into()))
            }
            Op::Conv2d { x, w, b } => conv2d(self.value(*x), self.value(*w), b.map(|b| self.value(b)))?,
            Op::GroupNorm { x, gamma, beta, groups } => {
                group_norm(self.value(*x), self.value(*gamma), self.value(*beta), *groups)?.0
            }
            Op::Silu(x) => self.map(*x, |v| v * sigmoid(v)),
            Op::AvgPool2(x) => avg_pool2(self.value(*x)),
            Op::Upsample2(x) => upsample2(self.value(*x)),
            Op::Concat(a, b) => concat(self.value(*a), self.value(*b))?,
            Op::Add(a, b) => self.zip(*a, *b, |x, y| x + y)?,
            Op::Sub(a, b) => self.zip(*a, *b, |x, y| x - y)?,
            Op::Mul(a, b) => self.zip(*a, *b, |x, y| x * y)?,
            Op::Div(a, b) => self.zip(*a, *b, |x, y| x / y)?,
            Op::Axpby { a, ka, b, kb } => self.zip(*a, *b, |x, y| ka * x + kb * y)?,
            Op::AddChannel { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let (c, h, w) = xv.chw();
                if vv.len() != c {
                    return Err(Error::Shape(format!("channel vector {} vs {c}", vv.len())));
                }
                let mut out = xv.clone();
                for (ch, plane) in out.data.chunks_exact_mut(h * w).enumerate() {
                    plane.iter_mut().for_each(|p| *p += vv.data[ch]);
                }
                out
            }
            Op::Linear { x, w, b } => {
                let (xv, wv, bv) = (self.value(*x), self.value(*w), self.value(*b));
                if wv.dims.len() != 2 || wv.dims[1] != xv.len() || wv.dims[0] != bv.len() {
                    return Err(Error::Shape(format!("linear {:?} x {:?}", wv.dims, xv.dims)));
                }
                let out: Vec<f64> = wv
                    .data
                    .chunks_exact(xv.len())
                    .zip(&bv.data)
                    .map(|(row, b)| b + row.iter().zip(&xv.data).map(|(a, c)| a * c).sum::<f64>())
                    .collect();
                Tensor::new(vec![out.len()], out)
            }
            Op::Scale(x, k) => self.map(*x, |v| k * v),
            Op::Offset(x, k) => self.map(*x, |v| v + k),
            Op::Abs(x) => self.map(*x, libm::fabs),
            Op::Clamp { x, lo, hi } => self.map(*x, |v| v.clamp(*lo, *hi)),
            Op::Mean(x) => {
                let v = self.value(*x);
                Tensor::scalar(v.data.iter().sum::<f64>() / v.len() as f64)
            }
            Op::Filter { x, kernel } => filter_valid(self.value(*x), kernel)?,
            Op::Fwm { reverse, forward, mask } => {
                let rev = self.value(*reverse).to_image()?;
                let out = spectral::fwm_fuse(forward, &rev, mask)?;
                Tensor::from(&out)
            }
        })
    }

    /// Recomputes every non-leaf node from the leaves and checks that the
    /// result is bit-identical to what was recorded.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut replay = Tape {
            params: self.params,
            param_nodes: self.param_nodes.clone(),
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for node in &self.nodes {
            let value = match node.op {
                Op::Input | Op::Constant | Op::Param(_) => node.value.clone(),
                _ => replay.eval(&node.op)?,
            };
            replay.nodes.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(self
            .nodes
            .iter()
            .zip(&replay.nodes)
            .all(|(a, b)| a.value.dims == b.value.dims
                && a.value.data.iter().zip(&b.value.data).all(|(x, y)| x.to_bits() == y.to_bits())))
    }

    /// Reverse accumulation from `output`, seeded with `seed` (same shape as
    /// the output).
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Tape("output node not on this tape".into()));
        }
        if seed.dims != self.value(output).dims {
            return Err(Error::Tape(format!(
                "seed {:?} vs output {:?}",
                seed.dims,
                self.value(output).dims
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&self.nodes[i].op, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match op {
            Op::Input | Op::Constant | Op::Param(_) => {}
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), g);
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    acc(*b, gb);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let (gx, gg, gb) = group_norm_backward(self.value(*x), self.value(*gamma), *groups, g);
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                acc(*x, Tensor::new(xv.dims.clone(), data));
            }
            Op::AvgPool2(x) => acc(*x, avg_pool2_backward(self.value(*x), g)),
            Op::Upsample2(x) => acc(*x, upsample2_backward(self.value(*x), g)),
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                acc(*a, Tensor::new(self.value(*a).dims.clone(), g.data[..na].to_vec()));
                acc(*b, Tensor::new(self.value(*b).dims.clone(), g.data[na..].to_vec()));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let mut n = g.clone();
                n.scale_assign(-1.0);
                acc(*b, n);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_t(g, vb, |gv, y| gv * y));
                acc(*b, zip_t(g, va, |gv, x| gv * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_t(g, vb, |gv, y| gv / y));
                let gb = Tensor::new(
                    vb.dims.clone(),
                    g.data
                        .iter()
                        .zip(&va.data)
                        .zip(&vb.data)
                        .map(|((gv, x), y)| -gv * x / (y * y))
                        .collect(),
                );
                acc(*b, gb);
            }
            Op::Axpby { a, ka, b, kb } => {
                let mut ga = g.clone();
                ga.scale_assign(*ka);
                let mut gb = g.clone();
                gb.scale_assign(*kb);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddChannel { x, v } => {
                let (_, h, w) = self.value(*x).chw();
                let gv: Vec<f64> = g.data.chunks_exact(h * w).map(|p| p.iter().sum()).collect();
                acc(*x, g.clone());
                acc(*v, Tensor::new(self.value(*v).dims.clone(), gv));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n_in = xv.len();
                let mut gx = vec![0.0; n_in];
                let mut gw = vec![0.0; wv.len()];
                for (o, &go) in g.data.iter().enumerate() {
                    let row = &wv.data[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        gx[i] += go * row[i];
                        gw[o * n_in + i] = go * xv.data[i];
                    }
                }
                acc(*x, Tensor::new(xv.dims.clone(), gx));
                acc(*w, Tensor::new(wv.dims.clone(), gw));
                acc(*b, g.clone());
            }
            Op::Scale(x, k) => {
                let mut gx = g.clone();
                gx.scale_assign(*k);
                acc(*x, gx);
            }
            Op::Offset(x, _) => acc(*x, g.clone()),
            Op::Abs(x) => {
                let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                acc(*x, zip_t(g, self.value(*x), |gv, v| gv * sign(v)));
            }
            Op::Clamp { x, lo, hi } => {
                acc(*x, zip_t(g, self.value(*x), |gv, v| if *lo < v && v < *hi { gv } else { 0.0 }));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let each = g.item() / xv.len() as f64;
                acc(*x, Tensor::new(xv.dims.clone(), vec![each; xv.len()]));
            }
            Op::Filter { x, kernel } => acc(*x, filter_valid_backward(self.value(*x), kernel, g)),
            Op::Fwm { reverse, forward, mask } => {
                let gr = fwm_backward(self.value(*reverse), forward, mask, g)?;
                acc(*reverse, gr);
            }
        }
        Ok(())
    }
}

/// Adjoints of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a node, if it was reached.
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients in parameter order; unreached parameters get
    /// zeros.
    pub fn params(&self, tape: &Tape<'_>) -> Vec<Tensor> {
        tape.params
            .iter()
            .zip(&tape.param_nodes)
            .map(|(p, node)| {
                node.and_then(|id| self.of(id).cloned())
                    .unwrap_or_else(|| p.zeros_like())
            })
            .collect()
    }
}

fn zip_t(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        b.dims.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-v))
}

/// Valid index range `[lo, hi)` of output positions whose input `pos + d`
/// lies inside `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (ci, h, wd) = x.chw();
    if w.dims.len() != 4 || w.dims[1] != ci || w.dims[2] != w.dims[3] || w.dims[2] % 2 == 0 {
        return Err(Error::Shape(format!("kernel {:?} for input {:?}", w.dims, x.dims)));
    }
    let (co, k) = (w.dims[0], w.dims[2]);
    if let Some(b) = b {
        if b.len() != co {
            return Err(Error::Shape(format!("bias {} for {co} outputs", b.len())));
        }
    }
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let mut out = vec![0.0; co * hw];
    for o in 0..co {
        let dst = &mut out[o * hw..(o + 1) * hw];
        if let Some(b) = b {
            dst.iter_mut().for_each(|v| *v = b.data[o]);
        }
        for i in 0..ci {
            let src = &x.data[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    let wv = w.data[((o * ci + i) * k + ky) * k + kx];
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let d = &mut dst[y * wd + x0..y * wd + x1];
                        let s0 = (x0 as isize + dx) as usize;
                        let s = &src[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![co, h, wd], out))
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, h, wd) = x.chw();
    let (co, k) = (w.dims[0], w.dims[2]);
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let mut gx = vec![0.0; ci * hw];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    for o in 0..co {
        let go = &g.data[o * hw..(o + 1) * hw];
        gb[o] = go.iter().sum();
        for i in 0..ci {
            let src = &x.data[i * hw..(i + 1) * hw];
            let gsrc = &mut gx[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = ((o * ci + i) * k + ky) * k + kx;
                    let wv = w.data[widx];
                    let mut dot = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        let grow = &go[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        for (gv, sv) in grow.iter().zip(srow) {
                            dot += gv * sv;
                        }
                        let gsrow = &mut gsrc[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        for (dst, gv) in gsrow.iter_mut().zip(grow) {
                            *dst += wv * gv;
                        }
                    }
                    gw[widx] += dot;
                }
            }
        }
    }
    (
        Tensor::new(x.dims.clone(), gx),
        Tensor::new(w.dims.clone(), gw),
        Tensor::new(vec![co], gb),
    )
}

/// Returns the normalized output and per-group `(mean, 1/std)`.
fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let (c, h, w) = x.chw();
    if groups == 0 || c % groups != 0 || gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("group norm: {c} channels, {groups} groups")));
    }
    let per = c / groups * h * w;
    let mut out = x.data.clone();
    let mut stats = Vec::with_capacity(groups);
    for (gi, chunk) in out.chunks_exact_mut(per).enumerate() {
        let mean = chunk.iter().sum::<f64>() / per as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let rstd = 1.0 / libm::sqrt(var + GROUP_NORM_EPS);
        stats.push((mean, rstd));
        for (ci, plane) in chunk.chunks_exact_mut(h * w).enumerate() {
            let ch = gi * (c / groups) + ci;
            let (ga, be) = (gamma.data[ch], beta.data[ch]);
            plane.iter_mut().for_each(|v| *v = ga * (*v - mean) * rstd + be);
        }
    }
    Ok((Tensor::new(x.dims.clone(), out), stats))
}

fn group_norm_backward(x: &Tensor, gamma: &Tensor, groups: usize, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = x.chw();
    let hw = h * w;
    let cpg = c / groups;
    let per = cpg * hw;
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for gi in 0..groups {
        let xs = &x.data[gi * per..(gi + 1) * per];
        let gs = &g.data[gi * per..(gi + 1) * per];
        let mean = xs.iter().sum::<f64>() / per as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let rstd = 1.0 / libm::sqrt(var + GROUP_NORM_EPS);
        let mut sum_gh = 0.0;
        let mut sum_gh_xh = 0.0;
        for ci in 0..cpg {
            let ch = gi * cpg + ci;
            for j in 0..hw {
                let idx = ci * hw + j;
                let xh = (xs[idx] - mean) * rstd;
                gg[ch] += gs[idx] * xh;
                gb[ch] += gs[idx];
                let gh = gs[idx] * gamma.data[ch];
                sum_gh += gh;
                sum_gh_xh += gh * xh;
            }
        }
        let n = per as f64;
        for ci in 0..cpg {
            let ch = gi * cpg + ci;
            for j in 0..hw {
                let idx = ci * hw + j;
                let xh = (xs[idx] - mean) * rstd;
                let gh = gs[idx] * gamma.data[ch];
                gx[gi * per + idx] = rstd / n * (n * gh - sum_gh - xh * sum_gh_xh);
            }
        }
    }
    (
        Tensor::new(x.dims.clone(), gx),
        Tensor::new(gamma.dims.clone(), gg),
        Tensor::new(gamma.dims.clone(), gb),
    )
}

fn avg_pool2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x.data[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out[(ch * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn avg_pool2_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g.data[(ch * oh + y) * ow + xx];
                for dy in 0..2 {
                    for dx in 0..2 {
                        gx[(ch * h + 2 * y + dy) * w + 2 * xx + dx] += v;
                    }
                }
            }
        }
    }
    Tensor::new(x.dims.clone(), gx)
}

fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x.data[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn upsample2_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0; x.len()];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                gx[(ch * h + y / 2) * w + xx / 2] += g.data[(ch * oh + y) * ow + xx];
            }
        }
    }
    Tensor::new(x.dims.clone(), gx)
}

fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.chw();
    let (cb, hb, wb) = b.chw();
    if (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!("concat {:?} with {:?}", a.dims, b.dims)));
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor::new(vec![ca + cb, ha, wa], data))
}

pub fn filter_valid(x: &Tensor, kernel: &[f64]) -> Result<Tensor> {
    let (c, h, w) = x.chw();
    let k = kernel.len();
    if k == 0 || k > h || k > w {
        return Err(Error::Shape(format!("filter of {k} taps on {h}x{w}")));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![0.0; c * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for ch in 0..c {
        let src = &x.data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..ow {
                tmp[y * ow + xx] = (0..k).map(|i| kernel[i] * src[y * w + xx + i]).sum();
            }
        }
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = (0..k).map(|i| kernel[i] * tmp[(y + i) * ow + xx]).sum();
            }
        }
    }
    Ok(Tensor::new(vec![c, oh, ow], out))
}

fn filter_valid_backward(x: &Tensor, kernel: &[f64], g: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut gx = vec![0.0; x.len()];
    let mut gtmp = vec![0.0; h * ow];
    for ch in 0..c {
        gtmp.iter_mut().for_each(|v| *v = 0.0);
        let go = &g.data[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let gv = go[y * ow + xx];
                for i in 0..k {
                    gtmp[(y + i) * ow + xx] += kernel[i] * gv;
                }
            }
        }
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..ow {
                let gv = gtmp[y * ow + xx];
                for i in 0..k {
                    dst[y * w + xx + i] += kernel[i] * gv;
                }
            }
        }
    }
    Tensor::new(x.dims.clone(), gx)
}

/// Adjoint of the amplitude fusion with respect to the reverse branch.
fn fwm_backward(reverse: &Tensor, forward: &ImageBuffer, mask: &FreqMask, g: &Tensor) -> Result<Tensor> {
    let (c, h, w) = reverse.chw();
    let plan = Fft2d::new(h, w);
    let hw = h * w;
    let mut gr = vec![0.0; reverse.len()];
    for ch in 0..c {
        let rev = spectral::dft2_with(&plan, &reverse.data[ch * hw..(ch + 1) * hw])?;
        let fwd = spectral::decompose(&spectral::dft2_with(&plan, forward.plane(ch))?);
        let gspec = spectral::dft2_with(&plan, &g.data[ch * hw..(ch + 1) * hw])?;
        let mut v = spectral::SpectralPlane::zeros(h, w);
        for k in 0..hw {
            if mask.values[k] == 0.0 {
                continue;
            }
            let rk = Complex64::new(rev.real[k], rev.imag[k]);
            let amp = rk.norm();
            if amp < PHASE_FLOOR {
                continue;
            }
            let gk = Complex64::new(gspec.real[k], gspec.imag[k]);
            let g_amp = mask.values[k] * (Complex64::from_polar(1.0, fwd.phase[k]) * gk.conj()).re;
            let unit = rk / amp;
            v.real[k] = g_amp * unit.re;
            v.imag[k] = g_amp * unit.im;
        }
        let (re, _) = spectral::idft2_complex(&plan, &v)?;
        gr[ch * hw..(ch + 1) * hw].copy_from_slice(&re);
    }
    Ok(Tensor::new(reverse.dims.clone(), gr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn normal(rng: &mut SeededRng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.normal()).collect())
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::detached();
        let x = tape.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let z = tape.scale(x, 0.0).unwrap();
        let c = tape.offset(z, 4.0).unwrap();
        let m = tape.mean(c).unwrap();
        assert_eq!(tape.value(m).item(), 4.0);
        let g = tape.backward(m, &Tensor::scalar(1.0)).unwrap();
        assert!(g.of(x).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let mut rng = SeededRng::new(2);
        let params = [normal(&mut rng, &[2, 1, 3, 3]), normal(&mut rng, &[2])];
        let x0 = normal(&mut rng, &[1, 5, 5]);
        let grad_of = |ka: f64, kb: f64| {
            let mut tape = Tape::new(&params);
            let x = tape.constant(x0.clone());
            let (w, b) = (tape.param(0), tape.param(1));
            let y = tape.conv2d(x, w, Some(b)).unwrap();
            let s = tape.silu(y).unwrap();
            let l1 = tape.mean(s).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let l2 = tape.mean(sq).unwrap();
            let total = tape.axpby(l1, ka, l2, kb).unwrap();
            tape.backward(total, &Tensor::scalar(1.0)).unwrap().params(&tape)
        };
        let (a, b) = (0.7, -1.9);
        let ga = grad_of(1.0, 0.0);
        let gb = grad_of(0.0, 1.0);
        let gab = grad_of(a, b);
        for k in 0..2 {
            for j in 0..gab[k].len() {
                let expect = a * ga[k].data[j] + b * gb[k].data[j];
                assert!((gab[k].data[j] - expect).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn replay_reproduces_recording() {
        let mut rng = SeededRng::new(3);
        let mut tape = Tape::detached();
        let x = tape.input(normal(&mut rng, &[4, 4, 4]));
        let g = tape.input(Tensor::new(vec![4], vec![1.0; 4]));
        let b = tape.input(Tensor::zeros(&[4]));
        let n = tape.group_norm(x, g, b, 2).unwrap();
        let p = tape.avg_pool2(n).unwrap();
        let u = tape.upsample2(p).unwrap();
        let c = tape.concat(u, x).unwrap();
        let _ = tape.mean(c).unwrap();
        assert!(tape.replay_matches().unwrap());
    }

    #[test]
    fn params_are_registered_once() {
        let params = [Tensor::scalar(2.0)];
        let mut tape = Tape::new(&params);
        let a = tape.param(0);
        let b = tape.param(0);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.params(&tape)[0].data, vec![4.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::detached();
        let a = tape.input(Tensor::zeros(&[1, 2, 2]));
        let b = tape.input(Tensor::zeros(&[1, 3, 3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.backward(a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn conv_same_padding_identity_kernel() {
        let mut rng = SeededRng::new(4);
        let x = normal(&mut rng, &[1, 4, 5]);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data[4] = 1.0;
        let y = conv2d(&x, &k, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn filter_valid_box() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect());
        let y = filter_valid(&x, &[1.0 / 3.0; 3]).unwrap();
        assert_eq!(y.dims, vec![1, 1, 1]);
        assert!((y.data[0] - 5.0).abs() < 1e-12);
    }
}
