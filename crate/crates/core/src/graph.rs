//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Graphs are built
//! per step and dropped afterwards.

use std::collections::HashMap;

use ndarray::{linalg::general_mat_mul, ArrayView2, ArrayViewMut2};

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Recip(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddChannel { x: usize, v: usize },
    MulChannel { x: usize, v: usize },
    Outer { a: usize, b: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, k: usize, dilation: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    AdaptiveAvgPool { x: usize },
    Upsample { x: usize },
    Concat { a: usize, b: usize },
    SegmentSum { x: usize, weights: Vec<f64>, segments: Vec<usize> },
    ChannelMean(usize),
    ChannelStd { x: usize },
    MeanSquare(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.shapes[var.0], g.clone()).expect("gradient shape"))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn channel_split(shape: &[usize]) -> (usize, usize) {
    let c = shape[0];
    let rest: usize = shape[1..].iter().product();
    (c, rest)
}

fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>, c: ArrayViewMut2<f64>, beta: f64) {
    general_mat_mul(1.0, &a, &b, beta, &mut { c });
}

/// Adaptive average pooling window `[start, end)` for output index `i`.
pub(crate) fn pool_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Bilinear source taps (align-corners off) for output index `i`.
pub(crate) fn bilinear_taps(i: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(input - 1);
    let i1 = (i0 + 1).min(input - 1);
    let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, t)
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, dilation: usize) -> Vec<f64> {
    let pad = (dilation * (k - 1) / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dy = (ky * dilation) as isize - pad;
                let dx = (kx * dilation) as isize - pad;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &x[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[y * w + xx] = src_row[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dilation: usize) -> Vec<f64> {
    let pad = (dilation * (k - 1) / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; cin * hw];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dy = (ky * dilation) as isize - pad;
                let dx = (kx * dilation) as isize - pad;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            x[base + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: usize) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every tensor of `store` as a leaf; those for which
    /// `trainable(name)` holds receive gradients.
    pub fn bind_params(&mut self, store: &ParamStore, trainable: impl Fn(&str) -> bool) {
        for (name, tensor) in store.iter() {
            let var = if trainable(name) {
                self.variable(tensor.clone())
            } else {
                self.constant(tensor.clone())
            };
            self.params.insert(name.to_string(), var);
        }
    }

    /// Bound parameter by name. Panics if the name was never bound; model
    /// structures validate their parameter sets before building graphs.
    pub fn p(&self, name: &str) -> Var {
        match self.params.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// `x [N, in] · wᵀ [in, out] + b` → `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.val(x.0).shape();
        let ws = self.val(w.0).shape();
        assert_eq!(xs.len(), 2, "linear input must be [N, in]");
        assert_eq!(xs[1], ws[1], "linear width mismatch {xs:?} vs {ws:?}");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.val(b.0).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        {
            let xa = ArrayView2::from_shape((n, din), self.val(x.0).data()).unwrap();
            let wa = ArrayView2::from_shape((dout, din), self.val(w.0).data()).unwrap();
            let oa = ArrayViewMut2::from_shape((n, dout), &mut out).unwrap();
            matmul(xa, wa.t(), oa, 1.0);
        }
        let value = Tensor::from_vec(&[n, dout], out).unwrap();
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.val(x.0).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.val(x.0).map(crate::nn::sigmoid);
        self.push(v, Op::Sigmoid(x.0), &[x.0])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.val(x.0).map(crate::nn::softplus);
        self.push(v, Op::Softplus(x.0), &[x.0])
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.val(x.0).map(|a| 1.0 / a);
        self.push(v, Op::Recip(x.0), &[x.0])
    }

    fn zip(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.len(), tb.len(), "elementwise size mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a.0, b.0, |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a.0, b.0, |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a.0, b.0, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.val(x.0).map(|a| a * k);
        self.push(v, Op::Scale(x.0, k), &[x.0])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let v = self.val(x.0).map(|a| a + k);
        self.push(v, Op::AddScalar(x.0), &[x.0])
    }

    /// `x[c, …] + v[c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (c, rest) = channel_split(self.val(x.0).shape());
        assert_eq!(self.val(v.0).len(), c, "add_channel width mismatch");
        let mut out = self.val(x.0).clone();
        let vv = self.val(v.0).data();
        for (ci, row) in out.data_mut().chunks_mut(rest).enumerate() {
            row.iter_mut().for_each(|a| *a += vv[ci]);
        }
        self.push(out, Op::AddChannel { x: x.0, v: v.0 }, &[x.0, v.0])
    }

    /// `x[c, …] · v[c]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Var {
        let (c, rest) = channel_split(self.val(x.0).shape());
        assert_eq!(self.val(v.0).len(), c, "mul_channel width mismatch");
        let mut out = self.val(x.0).clone();
        let vv = self.val(v.0).data();
        for (ci, row) in out.data_mut().chunks_mut(rest).enumerate() {
            row.iter_mut().for_each(|a| *a *= vv[ci]);
        }
        self.push(out, Op::MulChannel { x: x.0, v: v.0 }, &[x.0, v.0])
    }

    /// `a[c] · b[…]`, shaped `[C] ++ shape(b)`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let mut shape = vec![ta.len()];
        shape.extend_from_slice(tb.shape());
        let mut data = Vec::with_capacity(ta.len() * tb.len());
        for &x in ta.data() {
            data.extend(tb.data().iter().map(|&y| x * y));
        }
        let v = Tensor::from_vec(&shape, data).unwrap();
        self.push(v, Op::Outer { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Stride-1 "same" convolution of `x [Cin, H, W]` with `w [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Var {
        let (cin, h, wd) = self.val(x.0).chw().expect("conv2d input");
        let ws = self.val(w.0).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv kernel must be [Cout, Cin, k, k]");
        assert_eq!(ws[1], cin, "conv input channels {} vs kernel {:?}", cin, ws);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (cout, k) = (ws[0], ws[2]);
        assert!(k % 2 == 1, "odd kernels only");
        let hw = h * wd;
        let mut out = vec![0.0; cout * hw];
        if let Some(b) = b {
            for (co, row) in out.chunks_mut(hw).enumerate() {
                row.fill(self.val(b.0).data()[co]);
            }
        }
        let kk = cin * k * k;
        let wa = ArrayView2::from_shape((cout, kk), self.val(w.0).data()).unwrap();
        let oa = ArrayViewMut2::from_shape((cout, hw), &mut out).unwrap();
        if k == 1 {
            let xa = ArrayView2::from_shape((cin, hw), self.val(x.0).data()).unwrap();
            matmul(wa, xa, oa, 1.0);
        } else {
            let cols = im2col(self.val(x.0).data(), cin, h, wd, k, dilation);
            let ca = ArrayView2::from_shape((kk, hw), &cols).unwrap();
            matmul(wa, ca, oa, 1.0);
        }
        let v = Tensor::from_vec(&[cout, h, wd], out).unwrap();
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(
            v,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                k,
                dilation,
            },
            &inputs,
        )
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.val(x.0).chw().expect("max_pool2 input");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.val(x.0).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ci * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if src[idx] > best_v {
                            best_v = src[idx];
                            best = idx;
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::from_vec(&[c, oh, ow], out).unwrap();
        self.push(v, Op::MaxPool2 { x: x.0, argmax }, &[x.0])
    }

    /// Adaptive average pooling of `[C, H, W]` to `[C, oh, ow]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.val(x.0).chw().expect("adaptive_avg_pool input");
        assert!(oh >= 1 && ow >= 1 && oh <= h && ow <= w, "pool target too large");
        let src = self.val(x.0).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1) = pool_window(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_window(ox, w, ow);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += src[ci * h * w + y * w + xx];
                        }
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let v = Tensor::from_vec(&[c, oh, ow], out).unwrap();
        self.push(v, Op::AdaptiveAvgPool { x: x.0 }, &[x.0])
    }

    /// Bilinear upsampling of `[C, H, W]` to `[C, oh, ow]`, corners not aligned.
    pub fn upsample(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = crate::perceptual_encoder::upsample_tensor(self.val(x.0), oh, ow)
            .expect("upsample target smaller than source");
        self.push(v, Op::Upsample { x: x.0 }, &[x.0])
    }

    /// Channel concatenation of two `[C, H, W]` maps.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.val(a.0).chw().expect("concat lhs");
        let (cb, hb, wb) = self.val(b.0).chw().expect("concat rhs");
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = self.val(a.0).data().to_vec();
        data.extend_from_slice(self.val(b.0).data());
        let v = Tensor::from_vec(&[ca + cb, h, w], data).unwrap();
        self.push(v, Op::Concat { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Weighted scatter of point rows into pixels:
    /// `out[c, segments[s]] += weights[s] · x[s, c]`, producing `[C, n_segments]`.
    pub fn segment_sum(
        &mut self,
        x: Var,
        weights: Vec<f64>,
        segments: Vec<usize>,
        n_segments: usize,
    ) -> Var {
        let xs = self.val(x.0).shape();
        assert_eq!(xs.len(), 2, "segment_sum input must be [S, C]");
        let (s, c) = (xs[0], xs[1]);
        assert_eq!(weights.len(), s);
        assert_eq!(segments.len(), s);
        let src = self.val(x.0).data();
        let mut out = vec![0.0; c * n_segments];
        for i in 0..s {
            let seg = segments[i];
            let wgt = weights[i];
            for ch in 0..c {
                out[ch * n_segments + seg] += wgt * src[i * c + ch];
            }
        }
        let v = Tensor::from_vec(&[c, n_segments], out).unwrap();
        self.push(
            v,
            Op::SegmentSum {
                x: x.0,
                weights,
                segments,
            },
            &[x.0],
        )
    }

    /// Per-channel mean of `[C, …]` → `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, rest) = channel_split(self.val(x.0).shape());
        let data = self
            .val(x.0)
            .data()
            .chunks(rest)
            .map(|r| r.iter().sum::<f64>() / rest as f64)
            .collect();
        let v = Tensor::from_vec(&[c], data).unwrap();
        self.push(v, Op::ChannelMean(x.0), &[x.0])
    }

    /// Per-channel `sqrt(population variance + eps)` of `[C, …]` → `[C]`.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Var {
        let (c, _) = channel_split(self.val(x.0).shape());
        let data = crate::stats::channel_stats(self.val(x.0), eps)
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        let v = Tensor::from_vec(&[c], data).unwrap();
        self.push(v, Op::ChannelStd { x: x.0 }, &[x.0])
    }

    /// Mean of squared entries → `[1]`.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.val(x.0);
        let v = t.data().iter().map(|a| a * a).sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(v), Op::MeanSquare(x.0), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.val(x.0).clone().reshape(shape).expect("reshape");
        self.push(v, Op::Reshape(x.0), &[x.0])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.val(loss.0).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |i: usize, g: Vec<f64>| match &mut grads[i] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        };
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.val(*x).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.val(*w).shape()[0];
                let gya = ArrayView2::from_shape((n, dout), gy).unwrap();
                if self.needs(*x) {
                    let mut gx = vec![0.0; n * din];
                    let wa = ArrayView2::from_shape((dout, din), self.val(*w).data()).unwrap();
                    matmul(gya, wa, ArrayViewMut2::from_shape((n, din), &mut gx).unwrap(), 0.0);
                    acc(*x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; dout * din];
                    let xa = ArrayView2::from_shape((n, din), self.val(*x).data()).unwrap();
                    matmul(
                        gya.t(),
                        xa,
                        ArrayViewMut2::from_shape((dout, din), &mut gw).unwrap(),
                        0.0,
                    );
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![0.0; dout];
                        for row in gy.chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        acc(*b, gb);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.val(*x).data();
                acc(
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                acc(
                    *x,
                    gy.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect(),
                );
            }
            Op::Softplus(x) => {
                let xv = self.val(*x).data();
                acc(
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(g, &a)| g * crate::nn::sigmoid(a))
                        .collect(),
                );
            }
            Op::Recip(x) => {
                let xv = self.val(*x).data();
                acc(*x, gy.iter().zip(xv).map(|(g, a)| -g / (a * a)).collect());
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, gy.to_vec());
                }
                if self.needs(*b) {
                    acc(*b, gy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, gy.to_vec());
                }
                if self.needs(*b) {
                    acc(*b, gy.iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.val(*b).data();
                    acc(*a, gy.iter().zip(bv).map(|(g, v)| g * v).collect());
                }
                if self.needs(*b) {
                    let av = self.val(*a).data();
                    acc(*b, gy.iter().zip(av).map(|(g, v)| g * v).collect());
                }
            }
            Op::Scale(x, k) => acc(*x, gy.iter().map(|g| g * k).collect()),
            Op::AddScalar(x) => acc(*x, gy.to_vec()),
            Op::AddChannel { x, v } => {
                if self.needs(*x) {
                    acc(*x, gy.to_vec());
                }
                if self.needs(*v) {
                    let (_, rest) = channel_split(y.shape());
                    acc(*v, gy.chunks(rest).map(|r| r.iter().sum()).collect());
                }
            }
            Op::MulChannel { x, v } => {
                let (_, rest) = channel_split(y.shape());
                if self.needs(*x) {
                    let vv = self.val(*v).data();
                    acc(
                        *x,
                        gy.iter().enumerate().map(|(i, g)| g * vv[i / rest]).collect(),
                    );
                }
                if self.needs(*v) {
                    let xv = self.val(*x).data();
                    acc(
                        *v,
                        gy.chunks(rest)
                            .zip(xv.chunks(rest))
                            .map(|(g, xr)| g.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect(),
                    );
                }
            }
            Op::Outer { a, b } => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let rest = bv.len();
                if self.needs(*a) {
                    acc(
                        *a,
                        gy.chunks(rest)
                            .map(|r| r.iter().zip(bv).map(|(g, y)| g * y).sum())
                            .collect(),
                    );
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; rest];
                    for (r, &x) in gy.chunks(rest).zip(av) {
                        gb.iter_mut().zip(r).for_each(|(o, g)| *o += g * x);
                    }
                    acc(*b, gb);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                k,
                dilation,
            } => {
                let (cin, h, wd) = self.val(*x).chw().unwrap();
                let cout = y.shape()[0];
                let (hw, kk) = (h * wd, cin * k * k);
                let gya = ArrayView2::from_shape((cout, hw), gy).unwrap();
                let wa = ArrayView2::from_shape((cout, kk), self.val(*w).data()).unwrap();
                if self.needs(*w) {
                    let mut gw = vec![0.0; cout * kk];
                    let gwa = ArrayViewMut2::from_shape((cout, kk), &mut gw).unwrap();
                    if *k == 1 {
                        let xa = ArrayView2::from_shape((cin, hw), self.val(*x).data()).unwrap();
                        matmul(gya, xa.t(), gwa, 0.0);
                    } else {
                        let cols = im2col(self.val(*x).data(), cin, h, wd, *k, *dilation);
                        let ca = ArrayView2::from_shape((kk, hw), &cols).unwrap();
                        matmul(gya, ca.t(), gwa, 0.0);
                    }
                    acc(*w, gw);
                }
                if self.needs(*x) {
                    let mut gcols = vec![0.0; kk * hw];
                    matmul(
                        wa.t(),
                        gya,
                        ArrayViewMut2::from_shape((kk, hw), &mut gcols).unwrap(),
                        0.0,
                    );
                    if *k == 1 {
                        acc(*x, gcols);
                    } else {
                        acc(*x, col2im(&gcols, cin, h, wd, *k, *dilation));
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        acc(*b, gy.chunks(hw).map(|r| r.iter().sum()).collect());
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.val(*x).len()];
                for (g, &i) in gy.iter().zip(argmax) {
                    gx[i] += g;
                }
                acc(*x, gx);
            }
            Op::AdaptiveAvgPool { x } => {
                let (c, h, w) = self.val(*x).chw().unwrap();
                let (_, oh, ow) = y.chw().unwrap();
                let mut gx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oy in 0..oh {
                        let (y0, y1) = pool_window(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = pool_window(ox, w, ow);
                            let g = gy[(ci * oh + oy) * ow + ox]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    gx[ci * h * w + yy * w + xx] += g;
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample { x } => {
                let (c, h, w) = self.val(*x).chw().unwrap();
                let (_, oh, ow) = y.chw().unwrap();
                let mut gx = vec![0.0; c * h * w];
                for oy in 0..oh {
                    let (y0, y1, ty) = bilinear_taps(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1, tx) = bilinear_taps(ox, w, ow);
                        for ci in 0..c {
                            let g = gy[(ci * oh + oy) * ow + ox];
                            let base = ci * h * w;
                            gx[base + y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                            gx[base + y0 * w + x1] += g * (1.0 - ty) * tx;
                            gx[base + y1 * w + x0] += g * ty * (1.0 - tx);
                            gx[base + y1 * w + x1] += g * ty * tx;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat { a, b } => {
                let na = self.val(*a).len();
                if self.needs(*a) {
                    acc(*a, gy[..na].to_vec());
                }
                if self.needs(*b) {
                    acc(*b, gy[na..].to_vec());
                }
            }
            Op::SegmentSum {
                x,
                weights,
                segments,
            } => {
                let c = self.val(*x).shape()[1];
                let n_seg = y.shape()[1];
                let mut gx = vec![0.0; weights.len() * c];
                for (i, (&wgt, &seg)) in weights.iter().zip(segments).enumerate() {
                    for ch in 0..c {
                        gx[i * c + ch] = wgt * gy[ch * n_seg + seg];
                    }
                }
                acc(*x, gx);
            }
            Op::ChannelMean(x) => {
                let (_, rest) = channel_split(self.val(*x).shape());
                let gx = gy
                    .iter()
                    .flat_map(|g| std::iter::repeat(g / rest as f64).take(rest))
                    .collect();
                acc(*x, gx);
            }
            Op::ChannelStd { x } => {
                let xt = self.val(*x);
                let (_, rest) = channel_split(xt.shape());
                let mut gx = Vec::with_capacity(xt.len());
                for (ci, row) in xt.data().chunks(rest).enumerate() {
                    let mean = row.iter().sum::<f64>() / rest as f64;
                    let s = y.data()[ci];
                    gx.extend(row.iter().map(|v| gy[ci] * (v - mean) / (rest as f64 * s)));
                }
                acc(*x, gx);
            }
            Op::MeanSquare(x) => {
                let xv = self.val(*x).data();
                let k = 2.0 * gy[0] / xv.len() as f64;
                acc(*x, xv.iter().map(|v| k * v).collect());
            }
            Op::Reshape(x) => acc(*x, gy.to_vec()),
        }
    }
}
