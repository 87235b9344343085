//! Reverse-mode gradient tape.
//!
//! Every forward op appends a node holding its value and how it was produced.
//! Nodes are appended in evaluation order, so the tape is always topologically
//! sorted and `backward` is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Conv2d { input: usize, weight: usize, bias: Option<usize>, spec: Conv2dSpec },
    Upsample2x(usize),
    Relu(usize),
    Mse(usize, usize),
    Sum(usize),
    Reshape(usize),
    StraightThrough(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A single-use recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], one slot per recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not feed the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

/// Output spatial extent of a convolution.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output columns whose input column `o*stride + k - pad` is in bounds.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < out && (lo * stride + k) < pad {
        lo += 1;
    }
    let mut hi = lo;
    while hi < out && hi * stride + k < input + pad {
        hi += 1;
    }
    (lo, hi)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.o * g.ho * g.wo];
    let xr: Vec<(usize, usize)> =
        (0..g.kw).map(|kx| valid_range(g.wo, g.w, kx, g.stride, g.pad)).collect();
    let yr: Vec<(usize, usize)> =
        (0..g.kh).map(|ky| valid_range(g.ho, g.h, ky, g.stride, g.pad)).collect();
    for n in 0..g.n {
        for o in 0..g.o {
            let plane = &mut out[(n * g.o + o) * g.ho * g.wo..(n * g.o + o + 1) * g.ho * g.wo];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..g.c {
                let inp = &input[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = yr[ky];
                    for kx in 0..g.kw {
                        let wv = weight[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = xr[kx];
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut plane[oy * g.wo..(oy + 1) * g.wo];
                            let irow = &inp[iy * g.w..(iy + 1) * g.w];
                            for ox in x0..x1 {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    gout: &[f64],
    want_input: bool,
    want_weight: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gin = if want_input { vec![0.0; input.len()] } else { Vec::new() };
    let mut gw = if want_weight { vec![0.0; weight.len()] } else { Vec::new() };
    let mut gb = vec![0.0; g.o];
    let xr: Vec<(usize, usize)> =
        (0..g.kw).map(|kx| valid_range(g.wo, g.w, kx, g.stride, g.pad)).collect();
    let yr: Vec<(usize, usize)> =
        (0..g.kh).map(|ky| valid_range(g.ho, g.h, ky, g.stride, g.pad)).collect();
    for n in 0..g.n {
        for o in 0..g.o {
            let plane = &gout[(n * g.o + o) * g.ho * g.wo..(n * g.o + o + 1) * g.ho * g.wo];
            gb[o] += plane.iter().sum::<f64>();
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (y0, y1) = yr[ky];
                    for kx in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = weight[widx];
                        let (x0, x1) = xr[kx];
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &plane[oy * g.wo..(oy + 1) * g.wo];
                            let ioff = base + iy * g.w;
                            for ox in x0..x1 {
                                let ix = ioff + ox * g.stride + kx - g.pad;
                                if want_weight {
                                    acc += input[ix] * grow[ox];
                                }
                                if want_input {
                                    gin[ix] += wv * grow[ox];
                                }
                            }
                        }
                        if want_weight {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gin, gw, gb)
}

/// Element-wise combine into `acc`, creating it when absent.
fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: impl Iterator<Item = f64>) {
    match slot {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => {
            let data: Vec<f64> = delta.collect();
            *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].tracked)
    }

    /// Records a tensor that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a tensor that is treated as a constant (stop-gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies the value of `v` into a new untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary_same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let t = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let t = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub(a.0, b.0), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.value(a).shape(), data)?;
        let t = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul(a.0, b.0), t))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let t = self.tracked(&[a.0]);
        self.push(value, Op::Scale(a.0, k), t)
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let t = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), t))
    }

    /// Adds a length-`n` bias to every row of an `(m, n)` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape().to_vec(), self.value(bias).shape().to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(shape_err("add_row_bias", &sx, &sb));
        }
        let n = sx[1];
        let bd = self.value(bias).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v + bd[i % n]).collect();
        let value = Tensor::new(&sx, data)?;
        let t = self.tracked(&[x.0, bias.0]);
        Ok(self.push(value, Op::AddRowBias(x.0, bias.0), t))
    }

    fn conv_geom(&self, input: Var, weight: Var, spec: Conv2dSpec) -> Result<ConvGeom> {
        let si = self.value(input).shape();
        let sw = self.value(weight).shape();
        let (n, c, h, w) = match si.len() {
            3 => (1, si[0], si[1], si[2]),
            4 => (si[0], si[1], si[2], si[3]),
            _ => return Err(shape_err("conv2d input must be (C,H,W) or (N,C,H,W)", si, sw)),
        };
        if sw.len() != 4 || sw[1] != c {
            return Err(shape_err("conv2d input/kernel", si, sw));
        }
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = conv_out_dim(h, kh, spec.stride, spec.pad).ok_or_else(|| shape_err("conv2d", si, sw))?;
        let wo = conv_out_dim(w, kw, spec.stride, spec.pad).ok_or_else(|| shape_err("conv2d", si, sw))?;
        Ok(ConvGeom { n, c, h, w, o, kh, kw, ho, wo, stride: spec.stride, pad: spec.pad })
    }

    /// 2-D cross-correlation. Input `(C,H,W)` or `(N,C,H,W)`, kernel `(O,C,KH,KW)`, bias `(O)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let g = self.conv_geom(input, weight, spec)?;
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [g.o] {
                return Err(shape_err("conv2d bias", sb, self.value(weight).shape()));
            }
        }
        let out = conv_forward(
            &g,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = if self.value(input).ndim() == 3 {
            vec![g.o, g.ho, g.wo]
        } else {
            vec![g.n, g.o, g.ho, g.wo]
        };
        let value = Tensor::new(&shape, out)?;
        let mut deps = vec![input.0, weight.0];
        deps.extend(bias.map(|b| b.0));
        let t = self.tracked(&deps);
        Ok(self.push(
            value,
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.map(|b| b.0), spec },
            t,
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling over the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("upsample2x needs at least 2 dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] *= 2;
        shape[nd - 1] *= 2;
        let value = Tensor::new(&shape, out)?;
        let t = self.tracked(&[x.0]);
        Ok(self.push(value, Op::Upsample2x(x.0), t))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let t = self.tracked(&[x.0]);
        self.push(value, Op::Relu(x.0), t)
    }

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mse", a, b)?;
        let v = self.value(a).mse(self.value(b))?;
        let t = self.tracked(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a.0, b.0), t))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let t = self.tracked(&[x.0]);
        self.push(Tensor::scalar(v), Op::Sum(x.0), t)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let t = self.tracked(&[x.0]);
        Ok(self.push(value, Op::Reshape(x.0), t))
    }

    /// Forward value is `quantized`; the backward pass hands the output gradient to
    /// `pre` unchanged. Equivalent to `pre + stop_gradient(quantized - pre)`.
    pub fn straight_through(&mut self, pre: Var, quantized: &Tensor) -> Result<Var> {
        if self.value(pre).shape() != quantized.shape() {
            return Err(shape_err("straight_through", self.value(pre).shape(), quantized.shape()));
        }
        let t = self.tracked(&[pre.0]);
        Ok(self.push(quantized.clone(), Op::StraightThrough(pre.0), t))
    }

    /// Mean softmax cross-entropy of `(m, classes)` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (m, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidLabel { label: bad, classes: c });
        }
        let d = self.value(logits).data();
        let mut loss = 0.0;
        for i in 0..m {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
        }
        let t = self.tracked(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss / m.max(1) as f64),
            Op::SoftmaxCrossEntropy { logits: logits.0, labels: labels.to_vec() },
            t,
        ))
    }

    /// Reverse sweep from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape; record a new one".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(Tensor::full(&shapes[loss.0], 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let tracked = |j: usize| self.nodes[j].tracked;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if tracked(*a) {
                        accumulate(&mut grads[*a], &shapes[*a], g.data().iter().copied());
                    }
                    if tracked(*b) {
                        accumulate(&mut grads[*b], &shapes[*b], g.data().iter().copied());
                    }
                }
                Op::Sub(a, b) => {
                    if tracked(*a) {
                        accumulate(&mut grads[*a], &shapes[*a], g.data().iter().copied());
                    }
                    if tracked(*b) {
                        accumulate(&mut grads[*b], &shapes[*b], g.data().iter().map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    if tracked(*a) {
                        accumulate(&mut grads[*a], &shapes[*a], g.data().iter().zip(bv).map(|(g, b)| g * b));
                    }
                    if tracked(*b) {
                        accumulate(&mut grads[*b], &shapes[*b], g.data().iter().zip(av).map(|(g, a)| g * a));
                    }
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads[*a], &shapes[*a], g.data().iter().map(|v| v * k));
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (shapes[*a][0], shapes[*a][1]);
                    let nn = shapes[*b][1];
                    let (ad, bd, gd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data(), g.data());
                    if tracked(*a) {
                        let mut ga = vec![0.0; m * k];
                        for r in 0..m {
                            for p in 0..k {
                                let brow = &bd[p * nn..(p + 1) * nn];
                                let grow = &gd[r * nn..(r + 1) * nn];
                                ga[r * k + p] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads[*a], &shapes[*a], ga.into_iter());
                    }
                    if tracked(*b) {
                        let mut gb = vec![0.0; k * nn];
                        for r in 0..m {
                            for p in 0..k {
                                let av = ad[r * k + p];
                                let grow = &gd[r * nn..(r + 1) * nn];
                                let brow = &mut gb[p * nn..(p + 1) * nn];
                                for j in 0..nn {
                                    brow[j] += av * grow[j];
                                }
                            }
                        }
                        accumulate(&mut grads[*b], &shapes[*b], gb.into_iter());
                    }
                }
                Op::AddRowBias(x, b) => {
                    if tracked(*x) {
                        accumulate(&mut grads[*x], &shapes[*x], g.data().iter().copied());
                    }
                    if tracked(*b) {
                        let nn = shapes[*b][0];
                        let mut gb = vec![0.0; nn];
                        for (idx, v) in g.data().iter().enumerate() {
                            gb[idx % nn] += v;
                        }
                        accumulate(&mut grads[*b], &shapes[*b], gb.into_iter());
                    }
                }
                Op::Conv2d { input, weight, bias, spec } => {
                    let geom = self.conv_geom(Var(*input), Var(*weight), *spec)?;
                    let (gi, gw, gb) = conv_backward(
                        &geom,
                        self.nodes[*input].value.data(),
                        self.nodes[*weight].value.data(),
                        g.data(),
                        tracked(*input),
                        tracked(*weight),
                    );
                    if tracked(*input) {
                        accumulate(&mut grads[*input], &shapes[*input], gi.into_iter());
                    }
                    if tracked(*weight) {
                        accumulate(&mut grads[*weight], &shapes[*weight], gw.into_iter());
                    }
                    if let Some(b) = bias {
                        if tracked(*b) {
                            accumulate(&mut grads[*b], &shapes[*b], gb.into_iter());
                        }
                    }
                }
                Op::Upsample2x(x) => {
                    let s = &shapes[*x];
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let planes: usize = s[..s.len() - 2].iter().product();
                    let mut gx = vec![0.0; planes * h * w];
                    let gd = g.data();
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(p * h + y / 2) * w + xx / 2] += gd[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads[*x], &shapes[*x], gx.into_iter());
                }
                Op::Relu(x) => {
                    let xv = self.nodes[*x].value.data();
                    accumulate(
                        &mut grads[*x],
                        &shapes[*x],
                        g.data().iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }),
                    );
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let k = 2.0 * g.item() / av.len().max(1) as f64;
                    if tracked(*a) {
                        accumulate(&mut grads[*a], &shapes[*a], av.iter().zip(bv).map(|(x, y)| k * (x - y)));
                    }
                    if tracked(*b) {
                        accumulate(&mut grads[*b], &shapes[*b], av.iter().zip(bv).map(|(x, y)| -k * (x - y)));
                    }
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    let n = self.nodes[*x].value.numel();
                    accumulate(&mut grads[*x], &shapes[*x], std::iter::repeat_n(gv, n));
                }
                Op::Reshape(x) | Op::StraightThrough(x) => {
                    accumulate(&mut grads[*x], &shapes[*x], g.data().iter().copied());
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let (m, c) = (shapes[*logits][0], shapes[*logits][1]);
                    let d = self.nodes[*logits].value.data();
                    let gv = g.item() / m.max(1) as f64;
                    let mut gl = vec![0.0; m * c];
                    for r in 0..m {
                        let row = &d[r * c..(r + 1) * c];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / z;
                            gl[r * c + j] = gv * (p - if j == labels[r] { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads[*logits], &shapes[*logits], gl.into_iter());
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[3, 4]));
        let l = tape.mse(x, x).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = rand_tensor(&mut rng, &[1, 4, 4]);
        let kernel = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let k = tape.constant(kernel.clone());
        let y = tape.conv2d(x, k, None, Conv2dSpec { stride: 1, pad: 1 }).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 4, 4]);
        for oy in 0..4i64 {
            for ox in 0..4i64 {
                let mut acc = 0.0;
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += kernel.data()[(ky * 3 + kx) as usize]
                                * input.data()[(iy * 4 + ix) as usize];
                        }
                    }
                }
                assert!((out.data()[(oy * 4 + ox) as usize] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_conv_output_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let k = tape.constant(Tensor::zeros(&[5, 3, 3, 3]));
        let y = tape.conv2d(x, k, None, Conv2dSpec { stride: 2, pad: 1 }).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn scalar_hand_derivative() {
        let (w0, x0, y0) = (0.7, 1.3, -0.4);
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(&[1], vec![w0]).unwrap());
        let x = tape.constant(Tensor::new(&[1], vec![x0]).unwrap());
        let y = tape.constant(Tensor::new(&[1], vec![y0]).unwrap());
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.mse(wx, y).unwrap();
        let g = tape.backward(loss).unwrap();
        let expected = 2.0 * x0 * (w0 * x0 - y0);
        assert!((g.get(w).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn unreachable_gradient_is_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[3], 2.0));
        let b = tape.param(Tensor::full(&[2, 2], 1.0));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b), Tensor::zeros(&[2, 2]));
        assert_eq!(g.get(a), Tensor::full(&[3], 1.0));
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[3], 2.0));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[3], 2.0));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let ze = tape.param(rand_tensor(&mut rng, &[2, 3]));
        let zq = rand_tensor(&mut rng, &[2, 3]);
        let st = tape.straight_through(ze, &zq).unwrap();
        assert_eq!(tape.value(st), &zq);
        let target = tape.constant(rand_tensor(&mut rng, &[2, 3]));
        let l = tape.mse(st, target).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(ze), g.get(st));
    }
}
