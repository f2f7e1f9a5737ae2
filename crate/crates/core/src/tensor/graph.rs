use super::kernels::{self, ConvGeom};
use super::ledger::{FlopLedger, OpKind};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise maps with a closed-form derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    /// Exact erf-based GELU.
    Gelu,
    Sigmoid,
    Log,
    Exp,
    /// `x^p`, defined for `x >= 0` when `p` is not an integer.
    Pow(f64),
    /// `mul * x + add`.
    Affine { mul: f64, add: f64 },
    /// Clamp to `[lo, hi]`; zero gradient outside.
    Clamp { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Weight `[c_out, c_in, k, k]`.
    Standard,
    /// Weight `[c, 1, k, k]`: one kernel per channel.
    Depthwise,
    /// Weight `[c_out, c_in, 1, 1]`.
    Pointwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Scale { x: Var, s: f64 },
    Unary { x: Var, kind: Unary },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Conv { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, c_out: usize, depthwise: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    Transpose { x: Var, m: usize, n: usize },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, outer: usize, blocks: Vec<usize> },
    Slice { x: Var, outer: usize, block_in: usize, offset: usize, block_out: usize },
    Crop { x: Var, h: usize, w: usize, top: isize, left: isize, oh: usize, ow: usize },
    Upsample2 { x: Var, h: usize, w: usize },
    Rotate { x: Var, cos: Vec<f64>, sin: Vec<f64> },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation tape.
///
/// Nodes are created by the op methods and never removed; `backward` walks
/// them in reverse creation order. A graph is single-owner: build, run
/// `backward`, read gradients, then drop or [`zero_grad`](Graph::zero_grad).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ledger: FlopLedger,
}

fn softmax_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => gelu(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Pow(p) => x.powf(p),
            Unary::Affine { mul, add } => mul * x + add,
            Unary::Clamp { lo, hi } => x.clamp(lo, hi),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => gelu_grad(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Pow(p) => {
                if p == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            }
            Unary::Affine { mul, .. } => mul,
            Unary::Clamp { lo, hi } => {
                if x < lo || x > hi {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ledger(&self) -> &FlopLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut FlopLedger {
        &mut self.ledger
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf tracked for gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
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

    /// Gradient after `backward`; `None` for nodes the loss does not reach
    /// or that are not tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient, or zeros when the node did not receive one.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.ledger.record(OpKind::MatMul, (m * k * n) as u64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, rg, Op::MatMul { a, b, m, k, n }))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, Bcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((a, b, Bcast::Same));
        }
        let row_of = |full: &[usize], small: &[usize]| {
            full.len() >= 2
                && small.iter().product::<usize>() == *full.last().unwrap()
                && (small.len() == 1 || (small.len() == 2 && small[0] == 1))
        };
        let nb: usize = sb.iter().product();
        let na: usize = sa.iter().product();
        if nb == 1 {
            Ok((a, b, Bcast::Scalar))
        } else if na == 1 {
            Ok((b, a, Bcast::Scalar))
        } else if row_of(sa, sb) {
            Ok((a, b, Bcast::Row))
        } else if row_of(sb, sa) {
            Ok((b, a, Bcast::Row))
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (a, b, bc) = self.bcast(if mul { "mul" } else { "add" }, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let f = |x: f64, y: f64| if mul { x * y } else { x + y };
        let data: Vec<f64> = match bc {
            Bcast::Same => va.data().iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => va.data().iter().map(|&x| f(x, vb[0])).collect(),
            Bcast::Row => {
                let n = vb.len();
                va.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, vb[i % n]))
                    .collect()
            }
        };
        let shape = va.shape().to_vec();
        if mul {
            self.ledger.record(OpKind::Elementwise, data.len() as u64);
        }
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul { a, b, bc } } else { Op::Add { a, b, bc } };
        Ok(self.push(Tensor { shape, data }, rg, op))
    }

    /// Elementwise sum; one operand may be a single row or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product; one operand may be a single row or a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * s).collect::<Vec<_>>();
        let shape = v.shape().to_vec();
        self.ledger.record(OpKind::Elementwise, data.len() as u64);
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, rg, Op::Scale { x, s })
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| kind.apply(e)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, rg, Op::Unary { x, kind })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Unary::Pow(p))
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        self.unary(x, Unary::Affine { mul, add })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp { lo, hi })
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        if shape[axis] == 0 {
            return Err(Error::InvalidArgument("softmax over an empty axis".into()));
        }
        let (outer, len, inner) = softmax_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - mx).exp();
                    data[idx(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    data[idx(l)] /= s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Softmax { x, outer, len, inner },
        ))
    }

    /// 2-D cross-correlation of a `[c_in, h, w]` input with zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        mode: ConvMode,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let k = sw[2];
        let depthwise = match mode {
            ConvMode::Standard => {
                if sw[1] != c_in {
                    return Err(Error::shape("conv2d", &sx, &sw));
                }
                false
            }
            ConvMode::Pointwise => {
                if sw[1] != c_in || k != 1 {
                    return Err(Error::shape("conv2d(pointwise)", &sx, &sw));
                }
                false
            }
            ConvMode::Depthwise => {
                if sw[0] != c_in || sw[1] != 1 {
                    return Err(Error::shape("conv2d(depthwise)", &sx, &sw));
                }
                true
            }
        };
        let c_out = sw[0];
        if let Some(b) = bias {
            if self.value(b).numel() != c_out {
                return Err(Error::shape("conv2d(bias)", self.shape(b), &[c_out]));
            }
        }
        let geom = ConvGeom::new(c_in, h, w, k, stride, padding).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "kernel {k}x{k} larger than padded input {}x{} (padding {padding})",
                h + 2 * padding,
                w + 2 * padding
            ))
        })?;
        let ohw = geom.ho * geom.wo;
        if depthwise {
            self.ledger
                .record(OpKind::DepthwiseConv, (c_in * ohw * k * k) as u64);
        } else {
            self.ledger
                .record(OpKind::Conv, (c_out * c_in * k * k * ohw) as u64);
        }
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let mut data = if depthwise {
            kernels::depthwise(xs, ws, &geom)
        } else {
            if k == 1 && stride == 1 && padding == 0 {
                kernels::matmul(ws, xs, c_out, c_in, ohw)
            } else {
                let cols = kernels::im2col(xs, &geom);
                kernels::matmul(ws, &cols, c_out, c_in * k * k, ohw)
            }
        };
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (c, plane) in data.chunks_mut(ohw.max(1)).enumerate().take(c_out) {
                for v in plane {
                    *v += bv[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![c_out, geom.ho, geom.wo],
                data,
            },
            rg,
            Op::Conv { x, w: weight, bias, geom, c_out, depthwise },
        ))
    }

    /// Per-channel global maximum of `[c, h, w]` → `[c, 1, 1]`. The gradient
    /// goes to the first maximum in row-major order.
    pub fn max_pool_global(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape("max_pool_global", &s, &[0, 1, 1]));
        }
        let hw = s[1] * s[2];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0]);
        let mut argmax = Vec::with_capacity(s[0]);
        for c in 0..s[0] {
            let plane = &src[c * hw..(c + 1) * hw];
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            data.push(plane[best]);
            argmax.push(c * hw + best);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![s[0], 1, 1],
                data,
            },
            rg,
            Op::MaxPool { x, argmax },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[0, 0]));
        }
        let (m, n) = (s[0], s[1]);
        let data = kernels::transpose(self.value(x).data(), m, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, m], data }, rg, Op::Transpose { x, m, n }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape { x }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        let total: usize = blocks.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &blk) in parts.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(p).data()[o * blk..(o + 1) * blk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                blocks,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow [{start}, {}) of axis {axis} in shape {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let (block_in, block_out, offset) = (s[axis] * inner, len * inner, start * inner);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * block_out);
        for o in 0..outer {
            data.extend_from_slice(&src[o * block_in + offset..o * block_in + offset + block_out]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Slice { x, outer, block_in, offset, block_out },
        ))
    }

    /// `oh × ow` spatial window of a `[c, h, w]` map whose top-left corner is
    /// at `(top, left)`; positions outside the map read as zero.
    pub fn crop(&mut self, x: Var, top: isize, left: isize, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("crop", &s, &[0, oh, ow]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let iy = top + y as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for xx in 0..ow {
                    let ix = left + xx as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    data[(ch * oh + y) * ow + xx] = src[(ch * h + iy as usize) * w + ix as usize];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![c, oh, ow],
                data,
            },
            rg,
            Op::Crop { x, h, w, top, left, oh, ow },
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling of `[c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("upsample2", &s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![c, 2 * h, 2 * w],
                data,
            },
            rg,
            Op::Upsample2 { x, h, w },
        ))
    }

    /// Rotates consecutive channel pairs of a `[n, c]` tensor:
    /// `(a, b) -> (a cos - b sin, a sin + b cos)`, with one angle per
    /// `(token, pair)` supplied as `[n, c/2]` cosine and sine tables.
    pub fn rotate_pairs(&mut self, x: Var, cos: &[f64], sin: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] % 2 != 0 || cos.len() != s[0] * s[1] / 2 || sin.len() != cos.len() {
            return Err(Error::shape("rotate_pairs", &s, &[cos.len()]));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for p in 0..cos.len() {
            let (a, b) = (src[2 * p], src[2 * p + 1]);
            data[2 * p] = a * cos[p] - b * sin[p];
            data[2 * p + 1] = a * sin[p] + b * cos[p];
        }
        self.ledger.record(OpKind::Rotary, 2 * src.len() as u64);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape: s, data },
            rg,
            Op::Rotate {
                x,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
        ))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Every tracked node reached
    /// from the loss receives `d loss / d node`; untouched tracked leaves
    /// keep `grad == None` (read them with [`Graph::grad_or_zeros`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.rg(loss) {
            self.zero_grad();
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat(None))) {
            node.grad = match g {
                Some(data) if node.requires_grad => Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                }),
                _ => None,
            };
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if want(a) {
                    let da = kernels::matmul_nt(g, val(b), m, n, k);
                    acc(grads, a, m * k, |d| d.iter_mut().zip(&da).for_each(|(x, y)| *x += y));
                }
                if want(b) {
                    let at = kernels::transpose(val(a), m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    acc(grads, b, k * n, |d| d.iter_mut().zip(&db).for_each(|(x, y)| *x += y));
                }
            }
            &Op::Add { a, b, bc } => {
                if want(a) {
                    acc(grads, a, len(a), |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if want(b) {
                    let nb = len(b);
                    acc(grads, b, nb, |d| match bc {
                        Bcast::Same => d.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                        Bcast::Scalar => d[0] += g.iter().sum::<f64>(),
                        Bcast::Row => g.iter().enumerate().for_each(|(i, y)| d[i % nb] += y),
                    });
                }
            }
            &Op::Mul { a, b, bc } => {
                let (va, vb) = (val(a), val(b));
                let nb = vb.len();
                if want(a) {
                    acc(grads, a, va.len(), |d| {
                        for (i, x) in d.iter_mut().enumerate() {
                            let bv = match bc {
                                Bcast::Same => vb[i],
                                Bcast::Scalar => vb[0],
                                Bcast::Row => vb[i % nb],
                            };
                            *x += g[i] * bv;
                        }
                    });
                }
                if want(b) {
                    acc(grads, b, nb, |d| {
                        for (i, (&gi, &av)) in g.iter().zip(va).enumerate() {
                            let j = match bc {
                                Bcast::Same => i,
                                Bcast::Scalar => 0,
                                Bcast::Row => i % nb,
                            };
                            d[j] += gi * av;
                        }
                    });
                }
            }
            &Op::Scale { x, s } => {
                if want(x) {
                    acc(grads, x, g.len(), |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
                }
            }
            &Op::Unary { x, kind } => {
                if want(x) {
                    let (xv, yv) = (val(x), node.value.data());
                    acc(grads, x, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * kind.derivative(xv[i], yv[i]);
                        }
                    });
                }
            }
            &Op::Softmax { x, outer, len: l, inner } => {
                if want(x) {
                    let y = node.value.data();
                    acc(grads, x, y.len(), |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let id = |k: usize| (o * l + k) * inner + i;
                                let dot: f64 = (0..l).map(|k| g[id(k)] * y[id(k)]).sum();
                                for k in 0..l {
                                    d[id(k)] += y[id(k)] * (g[id(k)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            &Op::Conv { x, w, bias, geom, c_out, depthwise } => {
                let ohw = geom.ho * geom.wo;
                if let Some(b) = bias.filter(|&b| want(b)) {
                    acc(grads, b, c_out, |d| {
                        for (c, plane) in g.chunks(ohw.max(1)).enumerate().take(c_out) {
                            d[c] += plane.iter().sum::<f64>();
                        }
                    });
                }
                let (xv, wv) = (val(x), val(w));
                if depthwise {
                    if want(x) || want(w) {
                        let (dx, dw) = kernels::depthwise_backward(xv, wv, g, &geom);
                        if want(x) {
                            acc(grads, x, dx.len(), |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                        }
                        if want(w) {
                            acc(grads, w, dw.len(), |d| d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                        }
                    }
                } else {
                    let kk = geom.channels * geom.k * geom.k;
                    let direct = geom.k == 1 && geom.stride == 1 && geom.pad == 0;
                    if want(w) {
                        let dw = if direct {
                            kernels::matmul_nt(g, xv, c_out, ohw, kk)
                        } else {
                            kernels::matmul_nt(g, &kernels::im2col(xv, &geom), c_out, ohw, kk)
                        };
                        acc(grads, w, dw.len(), |d| d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                    }
                    if want(x) {
                        let wt = kernels::transpose(wv, c_out, kk);
                        let dcols = kernels::matmul(&wt, g, kk, c_out, ohw);
                        let dx = if direct { dcols } else { kernels::col2im(&dcols, &geom) };
                        acc(grads, x, dx.len(), |d| d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if want(*x) {
                    acc(grads, *x, len(*x), |d| {
                        for (c, &i) in argmax.iter().enumerate() {
                            d[i] += g[c];
                        }
                    });
                }
            }
            &Op::Transpose { x, m, n } => {
                if want(x) {
                    let t = kernels::transpose(g, n, m);
                    acc(grads, x, t.len(), |d| d.iter_mut().zip(&t).for_each(|(a, b)| *a += b));
                }
            }
            &Op::Reshape { x } => {
                if want(x) {
                    acc(grads, x, g.len(), |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                }
            }
            Op::Concat { parts, outer, blocks } => {
                let total: usize = blocks.iter().sum();
                let mut off = 0;
                for (&p, &blk) in parts.iter().zip(blocks) {
                    if want(p) {
                        acc(grads, p, outer * blk, |d| {
                            for o in 0..*outer {
                                let src = &g[o * total + off..o * total + off + blk];
                                d[o * blk..(o + 1) * blk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += b);
                            }
                        });
                    }
                    off += blk;
                }
            }
            &Op::Slice { x, outer, block_in, offset, block_out } => {
                if want(x) {
                    acc(grads, x, outer * block_in, |d| {
                        for o in 0..outer {
                            let dst = &mut d[o * block_in + offset..o * block_in + offset + block_out];
                            dst.iter_mut()
                                .zip(&g[o * block_out..(o + 1) * block_out])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            &Op::Crop { x, h, w, top, left, oh, ow } => {
                if want(x) {
                    let c = g.len() / (oh * ow).max(1);
                    acc(grads, x, c * h * w, |d| {
                        for ch in 0..c {
                            for y in 0..oh {
                                let iy = top + y as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for xx in 0..ow {
                                    let ix = left + xx as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    d[(ch * h + iy as usize) * w + ix as usize] += g[(ch * oh + y) * ow + xx];
                                }
                            }
                        }
                    });
                }
            }
            &Op::Upsample2 { x, h, w } => {
                if want(x) {
                    let c = len(x) / (h * w).max(1);
                    acc(grads, x, c * h * w, |d| {
                        for ch in 0..c {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    d[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                                }
                            }
                        }
                    });
                }
            }
            Op::Rotate { x, cos, sin } => {
                if want(*x) {
                    acc(grads, *x, g.len(), |d| {
                        for p in 0..cos.len() {
                            let (ga, gb) = (g[2 * p], g[2 * p + 1]);
                            d[2 * p] += ga * cos[p] + gb * sin[p];
                            d[2 * p + 1] += -ga * sin[p] + gb * cos[p];
                        }
                    });
                }
            }
            &Op::Sum { x } => {
                if want(x) {
                    let s = g[0];
                    acc(grads, x, len(x), |d| d.iter_mut().for_each(|a| *a += s));
                }
            }
        }
    }
}
