//! Tape-based reverse-mode automatic differentiation over rank-4 tensors.
//!
//! A [`Tape`] records every op of one forward pass in execution order, so
//! parents always precede children. [`Tape::backward`] walks the tape in
//! reverse and accumulates parameter gradients into the owning [`ParamStore`].
//! Tapes are built fresh for every step.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::param::{ParamId, ParamStore, StatUpdate, StatsId};
use crate::tensor::{Shape, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Tanh,
    Sigmoid,
}

/// One anchor of a pixel contrastive loss: pixel indices into the (n, h, w)
/// grid of the embedding tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTerm {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, cols: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Pointwise { x: usize, f: Pointwise },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale { x: usize, s: f64 },
    Shift { x: usize },
    Concat(Vec<usize>),
    SliceChannels { x: usize, start: usize },
    SliceWidth { x: usize, start: usize },
    UpsampleNearest { x: usize, f: usize },
    UpsampleBilinear { x: usize, f: usize },
    AvgPool { x: usize, k: usize },
    Sum(usize),
    Mean(usize),
    SumPerChannel(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Select { a: usize, b: usize, take_b: Vec<bool> },
    L2Normalize { x: usize, inv_norm: Vec<f64> },
    Contrastive { x: usize, terms: Vec<ContrastiveTerm>, tau: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, usize>,
    param_of: BTreeMap<usize, ParamId>,
    stat_updates: Vec<StatUpdate>,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        let i = v.index();
        self.grads.get(i)?.as_ref().map(|g| Tensor::new(self.shapes[i], g.clone()).expect("gradient shape"))
    }
}

fn reduce_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b}")));
    }
    Ok(a)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            param_of: BTreeMap::new(),
            stat_updates: Vec::new(),
            macs: 0,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: (self.nodes.len() - 1) as u32 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::UnknownNode(v.index()));
        }
        Ok(v.index())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters loaded onto this tape, in id order. This is the read trace of a forward pass.
    pub fn param_reads(&self) -> Vec<ParamId> {
        self.params.keys().copied().collect()
    }

    /// Multiply-accumulate count of all convolutions recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Batch statistics from train-mode batch norms, to be applied to running stats.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Loads a parameter. Repeated loads of the same id return the same variable,
    /// so every use site contributes to one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var { tape: self.id, idx: i as u32 };
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v.index());
        self.param_of.insert(v.index(), id);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if ws.h != ws.w {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {ws}")));
        }
        if ws.c != xs.c {
            return Err(Error::shape("conv2d", format!("input has {} channels, weight {ws} expects {}", xs.c, ws.c)));
        }
        if let Some(bi) = bi {
            let bs = self.nodes[bi].value.shape();
            if bs != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::shape("conv2d", format!("bias {bs} for {} output channels", ws.n)));
            }
        }
        let geom = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {ws} stride {stride} pad {pad} on input {xs}")))?;
        let (rows, l, c_out) = (geom.rows(), geom.cols(), ws.n);
        let out_shape = Shape::new(xs.n, c_out, geom.h_out, geom.w_out);
        let mut cols = vec![0.0; xs.n * rows * l];
        let mut out = vec![0.0; out_shape.numel()];
        {
            let xv = self.nodes[xi].value.data();
            let wv = self.nodes[wi].value.data();
            let in_per = xs.c * xs.plane();
            for n in 0..xs.n {
                let cn = &mut cols[n * rows * l..(n + 1) * rows * l];
                kernels::im2col(&geom, &xv[n * in_per..(n + 1) * in_per], cn);
                let on = &mut out[n * c_out * l..(n + 1) * c_out * l];
                kernels::gemm(c_out, rows, l, wv, (rows as isize, 1), cn, (l as isize, 1), 0.0, on, l as isize);
            }
            if let Some(bi) = bi {
                let bv = self.nodes[bi].value.data();
                for n in 0..xs.n {
                    for (co, &bias) in bv.iter().enumerate() {
                        let start = (n * c_out + co) * l;
                        out[start..start + l].iter_mut().for_each(|o| *o += bias);
                    }
                }
            }
        }
        self.macs += (xs.n * c_out * rows * l) as u64;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Conv2d { x: xi, w: wi, b: bi, geom, cols }))
    }

    /// Batch norm in train mode: normalizes with batch statistics and records
    /// them for the running-stat update.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, stats: StatsId, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let s = self.nodes[xi].value.shape();
        self.check_affine(gi, bi, s.c)?;
        let count = s.n * s.plane();
        if count <= 1 {
            return Err(Error::ZeroVariance(count));
        }
        let xv = self.nodes[xi].value.data();
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for c in 0..s.c {
            let mut acc = 0.0;
            for n in 0..s.n {
                let o = s.index(n, c, 0, 0);
                acc += xv[o..o + s.plane()].iter().sum::<f64>();
            }
            mean[c] = acc / count as f64;
            let mut sq = 0.0;
            for n in 0..s.n {
                let o = s.index(n, c, 0, 0);
                sq += xv[o..o + s.plane()].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
            var[c] = sq / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
        self.stat_updates.push(StatUpdate { id: stats, mean: mean.clone(), var: unbiased });
        self.finish_bn(xi, gi, bi, &mean, inv_std, true)
    }

    /// Batch norm in eval mode with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let c = self.nodes[xi].value.shape().c;
        self.check_affine(gi, bi, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats of length {} for {c} channels", mean.len())));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.finish_bn(xi, gi, bi, mean, inv_std, false)
    }

    fn check_affine(&self, gi: usize, bi: usize, c: usize) -> Result<()> {
        let want = Shape::new(1, c, 1, 1);
        for i in [gi, bi] {
            let got = self.nodes[i].value.shape();
            if got != want {
                return Err(Error::shape("batch_norm", format!("affine parameter {got}, expected {want}")));
            }
        }
        Ok(())
    }

    fn finish_bn(&mut self, xi: usize, gi: usize, bi: usize, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Result<Var> {
        let xv = &self.nodes[xi].value;
        let s = xv.shape();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut xhat = vec![0.0; s.numel()];
        let mut out = vec![0.0; s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let o = s.index(n, c, 0, 0);
                for i in o..o + s.plane() {
                    xhat[i] = (xv.data()[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::BatchNorm { x: xi, gamma: gi, beta: bi, xhat, inv_std, train }))
    }

    pub fn pointwise(&mut self, f: Pointwise, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(match f {
            Pointwise::Relu => |v: f64| v.max(0.0),
            Pointwise::Tanh => f64::tanh,
            Pointwise::Sigmoid => |v: f64| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
        });
        Ok(self.push(value, Op::Pointwise { x: xi, f }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Pointwise::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Pointwise::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Pointwise::Sigmoid, x)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let s = reduce_shape(name, self.nodes[ai].value.shape(), self.nodes[bi].value.shape())?;
        let data = self.nodes[ai].value.data().iter().zip(self.nodes[bi].value.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::new(s, data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(ai, bi)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(ai, bi)))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.map(|v| v * s);
        Ok(self.push(v, Op::Scale { x: xi, s }))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.map(|v| v + s);
        Ok(self.push(v, Op::Shift { x: xi }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = self.nodes[*idx.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?].value.shape();
        let mut c = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat_channels", format!("{s} vs {first}")));
            }
            c += s.c;
        }
        let out_shape = Shape::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let per = t.shape().c * t.shape().plane();
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Concat(idx)))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        if len == 0 || start + len > s.c {
            return Err(Error::shape("slice_channels", format!("{start}..{} of {s}", start + len)));
        }
        let out_shape = Shape::new(s.n, len, s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        let v = self.nodes[xi].value.data();
        for n in 0..s.n {
            let o = s.index(n, start, 0, 0);
            data.extend_from_slice(&v[o..o + len * s.plane()]);
        }
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SliceChannels { x: xi, start }))
    }

    pub fn slice_width(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        if len == 0 || start + len > s.w {
            return Err(Error::shape("slice_width", format!("{start}..{} of {s}", start + len)));
        }
        let out_shape = Shape::new(s.n, s.c, s.h, len);
        let mut data = Vec::with_capacity(out_shape.numel());
        let v = self.nodes[xi].value.data();
        for row in 0..s.n * s.c * s.h {
            let o = row * s.w + start;
            data.extend_from_slice(&v[o..o + len]);
        }
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SliceWidth { x: xi, start }))
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        if f == 0 {
            return Err(Error::shape("upsample_nearest", "factor 0"));
        }
        let s = self.nodes[xi].value.shape();
        let out_shape = Shape::new(s.n, s.c, s.h * f, s.w * f);
        let v = self.nodes[xi].value.data();
        let mut data = vec![0.0; out_shape.numel()];
        for p in 0..s.n * s.c {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    data[(p * out_shape.h + y) * out_shape.w + x] = v[(p * s.h + y / f) * s.w + x / f];
                }
            }
        }
        Ok(self.push(Tensor::new(out_shape, data)?, Op::UpsampleNearest { x: xi, f }))
    }

    /// Bilinear upsampling by an integer factor with half-pixel centres.
    pub fn upsample_bilinear(&mut self, x: Var, f: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        if f == 0 {
            return Err(Error::shape("upsample_bilinear", "factor 0"));
        }
        let s = self.nodes[xi].value.shape();
        let out_shape = Shape::new(s.n, s.c, s.h * f, s.w * f);
        let (ty, tx) = (kernels::bilinear_taps(s.h, f), kernels::bilinear_taps(s.w, f));
        let v = self.nodes[xi].value.data();
        let mut data = vec![0.0; out_shape.numel()];
        for p in 0..s.n * s.c {
            let src = &v[p * s.plane()..(p + 1) * s.plane()];
            for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - wx) + src[y0 * s.w + x1] * wx;
                    let bot = src[y1 * s.w + x0] * (1.0 - wx) + src[y1 * s.w + x1] * wx;
                    data[(p * out_shape.h + y) * out_shape.w + x] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        Ok(self.push(Tensor::new(out_shape, data)?, Op::UpsampleBilinear { x: xi, f }))
    }

    /// Non-overlapping k x k average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        if k == 0 || !s.h.is_multiple_of(k) || !s.w.is_multiple_of(k) {
            return Err(Error::shape("avg_pool", format!("window {k} on {s}")));
        }
        let out_shape = Shape::new(s.n, s.c, s.h / k, s.w / k);
        let v = self.nodes[xi].value.data();
        let mut data = vec![0.0; out_shape.numel()];
        let norm = 1.0 / (k * k) as f64;
        for p in 0..s.n * s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    data[(p * out_shape.h + y / k) * out_shape.w + x / k] += v[(p * s.h + y) * s.w + x] * norm;
                }
            }
        }
        Ok(self.push(Tensor::new(out_shape, data)?, Op::AvgPool { x: xi, k }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let total = self.nodes[xi].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(xi)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(xi)))
    }

    /// Sums over n, h and w, leaving a 1 x C x 1 x 1 tensor.
    pub fn sum_per_channel(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = &self.nodes[xi].value;
        let s = t.shape();
        let mut out = vec![0.0; s.c];
        for n in 0..s.n {
            for (c, o) in out.iter_mut().enumerate() {
                let i = s.index(n, c, 0, 0);
                *o += t.data()[i..i + s.plane()].iter().sum::<f64>();
            }
        }
        Ok(self.push(Tensor::new([1, s.c, 1, 1], out)?, Op::SumPerChannel(xi)))
    }

    fn channel_softmax(t: &Tensor, log: bool) -> Tensor {
        let s = t.shape();
        let v = t.data();
        let mut out = vec![0.0; s.numel()];
        let plane = s.plane();
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let m = (0..s.c).map(|c| v[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..s.c).map(|c| (v[at(c)] - m).exp()).sum();
                let lz = z.ln();
                for c in 0..s.c {
                    out[at(c)] = if log { v[at(c)] - m - lz } else { (v[at(c)] - m).exp() / z };
                }
            }
        }
        Tensor::new(s, out).expect("same shape")
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = Self::channel_softmax(&self.nodes[xi].value, false);
        Ok(self.push(v, Op::Softmax(xi)))
    }

    pub fn log_softmax_channel(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = Self::channel_softmax(&self.nodes[xi].value, true);
        Ok(self.push(v, Op::LogSoftmax(xi)))
    }

    /// Elementwise routing: `out[i] = if take_b[i] { b[i] } else { a[i] }`.
    ///
    /// The mask is a constant of the step; gradients follow the chosen source.
    pub fn select(&mut self, a: Var, b: Var, take_b: Vec<bool>) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let s = reduce_shape("select", self.nodes[ai].value.shape(), self.nodes[bi].value.shape())?;
        if take_b.len() != s.numel() {
            return Err(Error::shape("select", format!("mask of {} for {s}", take_b.len())));
        }
        let (av, bv) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let data = take_b.iter().enumerate().map(|(i, &t)| if t { bv[i] } else { av[i] }).collect();
        Ok(self.push(Tensor::new(s, data)?, Op::Select { a: ai, b: bi, take_b }))
    }

    /// Scales every pixel's channel vector to (nearly) unit L2 norm; see [`l2_normalized`].
    pub fn l2_normalize_channels(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (out, inv_norm) = l2_normalized(&self.nodes[xi].value);
        Ok(self.push(out, Op::L2Normalize { x: xi, inv_norm }))
    }

    /// Mean over anchors (and each anchor's positives) of
    /// `-log(exp(s_ap/tau) / (exp(s_ap/tau) + sum_neg exp(s_an/tau)))`,
    /// where `s` is the dot product of channel vectors (cosine similarity for
    /// normalized input).
    pub fn contrastive(&mut self, x: Var, terms: Vec<ContrastiveTerm>, tau: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        if tau <= 0.0 {
            return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
        }
        let t = &self.nodes[xi].value;
        let s = t.shape();
        let pixels = s.n * s.plane();
        let terms: Vec<ContrastiveTerm> = terms.into_iter().filter(|t| !t.positives.is_empty()).collect();
        for term in &terms {
            if std::iter::once(&term.anchor).chain(&term.positives).chain(&term.negatives).any(|&p| p >= pixels) {
                return Err(Error::shape("contrastive", format!("pixel index beyond {pixels} pixels")));
            }
        }
        let mut total = 0.0;
        for term in &terms {
            let mut acc = 0.0;
            for &p in &term.positives {
                let (l0, negs) = contrastive_logits(t, term, p, tau);
                let m = negs.iter().copied().fold(l0, f64::max);
                let lse = m + ((l0 - m).exp() + negs.iter().map(|l| (l - m).exp()).sum::<f64>()).ln();
                acc += lse - l0;
            }
            total += acc / term.positives.len() as f64;
        }
        let loss = if terms.is_empty() { 0.0 } else { total / terms.len() as f64 };
        Ok(self.push(Tensor::scalar(loss), Op::Contrastive { x: xi, terms, tau }))
    }

    /// Reverse pass from a scalar loss. Parameter gradients are added to the
    /// store's gradient buffers; they accumulate across calls until
    /// [`ParamStore::zero_grad`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (&node, &pid) in &self.param_of {
            if let Some(g) = &grads.grads[node] {
                store.accumulate_grad(pid, g);
            }
        }
        Ok(grads)
    }

    /// Reverse pass without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let ls = self.nodes[li].value.shape();
        if ls != Shape::SCALAR {
            return Err(Error::NotScalar(ls));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { tape: self.id, grads, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let xs = self.nodes[*x].value.shape();
                let ws = self.nodes[*w].value.shape();
                let (rows, l, c_out) = (geom.rows(), geom.cols(), ws.n);
                let wv = val(*w);
                let mut dw = vec![0.0; ws.numel()];
                let mut dx = vec![0.0; xs.numel()];
                let mut dcols = vec![0.0; rows * l];
                let in_per = xs.c * xs.plane();
                for n in 0..xs.n {
                    let gn = &g[n * c_out * l..(n + 1) * c_out * l];
                    let cn = &cols[n * rows * l..(n + 1) * rows * l];
                    // dW += dY_n * cols_n^T
                    kernels::gemm(c_out, l, rows, gn, (l as isize, 1), cn, (1, l as isize), 1.0, &mut dw, rows as isize);
                    // dcols = W^T * dY_n
                    kernels::gemm(rows, c_out, l, wv, (1, rows as isize), gn, (l as isize, 1), 0.0, &mut dcols, l as isize);
                    kernels::col2im(geom, &dcols, &mut dx[n * in_per..(n + 1) * in_per]);
                }
                acc(grads, *x, &dx);
                acc(grads, *w, &dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; c_out];
                    for n in 0..xs.n {
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += g[(n * c_out + co) * l..(n * c_out + co + 1) * l].iter().sum::<f64>();
                        }
                    }
                    acc(grads, *b, &db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = node.value.shape();
                let gv = val(*gamma);
                let m = (s.n * s.plane()) as f64;
                let mut dgamma = vec![0.0; s.c];
                let mut dbeta = vec![0.0; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let o = s.index(n, c, 0, 0);
                        for k in o..o + s.plane() {
                            dgamma[c] += g[k] * xhat[k];
                            dbeta[c] += g[k];
                        }
                    }
                }
                let mut dx = vec![0.0; s.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let o = s.index(n, c, 0, 0);
                        let scale = gv[c] * inv_std[c];
                        for k in o..o + s.plane() {
                            dx[k] = if *train { scale * (g[k] - dbeta[c] / m - xhat[k] * dgamma[c] / m) } else { scale * g[k] };
                        }
                    }
                }
                acc(grads, *x, &dx);
                acc(grads, *gamma, &dgamma);
                acc(grads, *beta, &dbeta);
            }
            Op::Pointwise { x, f } => {
                let xv = val(*x);
                let d: Vec<f64> = match f {
                    Pointwise::Relu => g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Pointwise::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Pointwise::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                };
                acc(grads, *x, &d);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                let da: Vec<f64> = g.iter().zip(bv).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = g.iter().zip(out).zip(bv).map(|((g, q), y)| -g * q / y).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::Scale { x, s } => {
                let d: Vec<f64> = g.iter().map(|v| v * s).collect();
                acc(grads, *x, &d);
            }
            Op::Shift { x } => acc(grads, *x, g),
            Op::Concat(parts) => {
                let s = node.value.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.nodes[p].value.shape();
                    let per = ps.c * ps.plane();
                    let mut d = Vec::with_capacity(ps.numel());
                    for n in 0..s.n {
                        let o = s.index(n, offset, 0, 0);
                        d.extend_from_slice(&g[o..o + per]);
                    }
                    acc(grads, p, &d);
                    offset += ps.c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let s = node.value.shape();
                let mut d = vec![0.0; xs.numel()];
                let per = s.c * s.plane();
                for n in 0..s.n {
                    let o = xs.index(n, *start, 0, 0);
                    d[o..o + per].copy_from_slice(&g[n * per..(n + 1) * per]);
                }
                acc(grads, *x, &d);
            }
            Op::SliceWidth { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let len = node.value.shape().w;
                let mut d = vec![0.0; xs.numel()];
                for row in 0..xs.n * xs.c * xs.h {
                    d[row * xs.w + start..row * xs.w + start + len].copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                acc(grads, *x, &d);
            }
            Op::UpsampleNearest { x, f } => {
                let xs = self.nodes[*x].value.shape();
                let os = node.value.shape();
                let mut d = vec![0.0; xs.numel()];
                for p in 0..xs.n * xs.c {
                    for y in 0..os.h {
                        for xx in 0..os.w {
                            d[(p * xs.h + y / f) * xs.w + xx / f] += g[(p * os.h + y) * os.w + xx];
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::UpsampleBilinear { x, f } => {
                let xs = self.nodes[*x].value.shape();
                let os = node.value.shape();
                let (ty, tx) = (kernels::bilinear_taps(xs.h, *f), kernels::bilinear_taps(xs.w, *f));
                let mut d = vec![0.0; xs.numel()];
                for p in 0..xs.n * xs.c {
                    let dst = &mut d[p * xs.plane()..(p + 1) * xs.plane()];
                    for (y, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (xx, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let go = g[(p * os.h + y) * os.w + xx];
                            dst[y0 * xs.w + x0] += go * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * xs.w + x1] += go * (1.0 - wy) * wx;
                            dst[y1 * xs.w + x0] += go * wy * (1.0 - wx);
                            dst[y1 * xs.w + x1] += go * wy * wx;
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::AvgPool { x, k } => {
                let xs = self.nodes[*x].value.shape();
                let os = node.value.shape();
                let norm = 1.0 / (k * k) as f64;
                let mut d = vec![0.0; xs.numel()];
                for p in 0..xs.n * xs.c {
                    for y in 0..xs.h {
                        for xx in 0..xs.w {
                            d[(p * xs.h + y) * xs.w + xx] = g[(p * os.h + y / k) * os.w + xx / k] * norm;
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.nodes[*x].value.numel()];
                acc(grads, *x, &d);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                let d = vec![g[0] / n as f64; n];
                acc(grads, *x, &d);
            }
            Op::SumPerChannel(x) => {
                let s = self.nodes[*x].value.shape();
                let mut d = vec![0.0; s.numel()];
                for n in 0..s.n {
                    for (c, gc) in g.iter().enumerate() {
                        let o = s.index(n, c, 0, 0);
                        d[o..o + s.plane()].fill(*gc);
                    }
                }
                acc(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut d = vec![0.0; s.numel()];
                for n in 0..s.n {
                    for p in 0..plane {
                        let at = |c: usize| (n * s.c + c) * plane + p;
                        let dot: f64 = (0..s.c).map(|c| g[at(c)] * out[at(c)]).sum();
                        for c in 0..s.c {
                            d[at(c)] = out[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::LogSoftmax(x) => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut d = vec![0.0; s.numel()];
                for n in 0..s.n {
                    for p in 0..plane {
                        let at = |c: usize| (n * s.c + c) * plane + p;
                        let gsum: f64 = (0..s.c).map(|c| g[at(c)]).sum();
                        for c in 0..s.c {
                            d[at(c)] = g[at(c)] - out[at(c)].exp() * gsum;
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::Select { a, b, take_b } => {
                let da: Vec<f64> = g.iter().zip(take_b).map(|(g, &t)| if t { 0.0 } else { *g }).collect();
                let db: Vec<f64> = g.iter().zip(take_b).map(|(g, &t)| if t { *g } else { 0.0 }).collect();
                acc(grads, *a, &da);
                acc(grads, *b, &db);
            }
            Op::L2Normalize { x, inv_norm } => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut d = vec![0.0; s.numel()];
                for n in 0..s.n {
                    for p in 0..plane {
                        let at = |c: usize| (n * s.c + c) * plane + p;
                        let dot: f64 = (0..s.c).map(|c| g[at(c)] * out[at(c)]).sum();
                        let inv = inv_norm[n * plane + p];
                        for c in 0..s.c {
                            d[at(c)] = (g[at(c)] - out[at(c)] * dot) * inv;
                        }
                    }
                }
                acc(grads, *x, &d);
            }
            Op::Contrastive { x, terms, tau } => {
                let t = &self.nodes[*x].value;
                let s = t.shape();
                let plane = s.plane();
                let mut d = vec![0.0; s.numel()];
                let scale = if terms.is_empty() { 0.0 } else { g[0] / terms.len() as f64 };
                let add_pair = |d: &mut [f64], i: usize, j: usize, coef: f64| {
                    let (ni, pi) = (i / plane, i % plane);
                    let (nj, pj) = (j / plane, j % plane);
                    for c in 0..s.c {
                        let ai = (ni * s.c + c) * plane + pi;
                        let aj = (nj * s.c + c) * plane + pj;
                        let (vi, vj) = (t.data()[ai], t.data()[aj]);
                        d[ai] += coef * vj;
                        d[aj] += coef * vi;
                    }
                };
                for term in terms {
                    let w = scale / term.positives.len() as f64;
                    for &p in &term.positives {
                        let (l0, negs) = contrastive_logits(t, term, p, *tau);
                        let m = negs.iter().copied().fold(l0, f64::max);
                        let z = (l0 - m).exp() + negs.iter().map(|l| (l - m).exp()).sum::<f64>();
                        let q0 = (l0 - m).exp() / z;
                        add_pair(&mut d, term.anchor, p, w * (q0 - 1.0) / tau);
                        for (&nidx, l) in term.negatives.iter().zip(&negs) {
                            add_pair(&mut d, term.anchor, nidx, w * ((l - m).exp() / z) / tau);
                        }
                    }
                }
                acc(grads, *x, &d);
            }
        }
    }
}

/// Dot product of the channel vectors at two pixel indices.
/// Added to the squared norm before normalizing, so an all-zero channel
/// vector maps to zero with a bounded (1e3) rather than singular derivative.
pub const NORM_EPS_SQ: f64 = 1e-6;

/// Per-pixel `x / sqrt(|x|^2 + NORM_EPS_SQ)` over channels, with the inverse norms.
pub fn l2_normalized(t: &Tensor) -> (Tensor, Vec<f64>) {
    let s = t.shape();
    let plane = s.plane();
    let mut inv_norm = vec![0.0; s.n * plane];
    let mut out = t.clone();
    for n in 0..s.n {
        for p in 0..plane {
            let at = |c: usize| (n * s.c + c) * plane + p;
            let inv = 1.0 / ((0..s.c).map(|c| t.data()[at(c)].powi(2)).sum::<f64>() + NORM_EPS_SQ).sqrt();
            inv_norm[n * plane + p] = inv;
            for c in 0..s.c {
                out.data_mut()[at(c)] *= inv;
            }
        }
    }
    (out, inv_norm)
}

pub(crate) fn pixel_dot(t: &Tensor, i: usize, j: usize) -> f64 {
    let s = t.shape();
    let plane = s.plane();
    let (ni, pi) = (i / plane, i % plane);
    let (nj, pj) = (j / plane, j % plane);
    (0..s.c).map(|c| t.data()[(ni * s.c + c) * plane + pi] * t.data()[(nj * s.c + c) * plane + pj]).sum()
}

fn contrastive_logits(t: &Tensor, term: &ContrastiveTerm, p: usize, tau: f64) -> (f64, Vec<f64>) {
    let l0 = pixel_dot(t, term.anchor, p) / tau;
    let negs = term.negatives.iter().map(|&n| pixel_dot(t, term.anchor, n) / tau).collect();
    (l0, negs)
}

fn acc(grads: &mut [Option<Vec<f64>>], i: usize, d: &[f64]) {
    match &mut grads[i] {
        Some(g) => g.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}
