//! Reverse-mode differentiation over a per-iteration tape.
//!
//! A [`Graph`] records every operation applied during one forward pass. Leaves
//! are either trainable (gradients flow into them) or constant. Nodes whose
//! inputs are all constant are themselves constant and are skipped by
//! [`Graph::backward`], which is what makes frozen parameter groups cheap.

use crate::boxes::{Box, MAX_LOG_SCALE};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Resize(Var),
    Concat(Vec<Var>),
    ToHwc(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid(Var),
    SoftmaxChannels(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    RoiPool {
        x: Var,
        argmax: Vec<usize>,
    },
    StopGradient,
    BoxDecode {
        deltas: Var,
        anchors: Vec<Box>,
        stds: [f64; 4],
    },
    ClipBoxes {
        x: Var,
    },
    BoxEncode {
        boxes: Var,
        gts: Vec<Box>,
        stds: [f64; 4],
    },
    /// Scalar whose input gradients were computed during the forward pass.
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is ever propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Stride-1 square convolution with zero padding. `w` is `O×C×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv weight {:?} incompatible with input channels {}",
                ws, c
            )));
        }
        let (o, k) = (ws[0], ws[2]);
        if 2 * pad + 1 != k {
            return Err(Error::Shape(format!(
                "only same-size convolutions are supported (k={}, pad={})",
                k, pad
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::Shape("conv bias length".into()));
            }
        }
        let hw = h * wd;
        let kk = c * k * k;
        let cols = if k == 1 {
            Vec::new()
        } else {
            tensor::im2col(self.value(x).data(), c, h, wd, k, pad)
        };
        let mut out = vec![0.0; o * hw];
        {
            let input = if k == 1 { self.value(x).data() } else { &cols };
            tensor::gemm(o, kk, hw, self.value(w).data(), false, input, false, &mut out, 0.0);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (oc, row) in out.chunks_mut(hw).enumerate() {
                let bv = bias[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let cols = if rg && self.requires_grad(w) { cols } else { Vec::new() };
        let value = Tensor::new(&[o, h, wd], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                k,
                pad,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns form
    /// partial windows, giving `⌈H/2⌉×⌈W/2⌉` outputs.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let i = (ch * h + y) * w + xx;
                            if src[i] > best {
                                best = src[i];
                                bi = i;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = bi;
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `k×k` average pooling with stride `k`; spatial dims must divide.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!(
                "average pool {} does not divide {}×{}",
                k, h, w
            )));
        }
        if k == 1 {
            return Ok(x);
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let inv = 1.0 / (k * k) as f64;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / k) * ow + xx / k] += src[(ch * h + y) * w + xx] * inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, rg))
    }

    /// Bilinear resize (half-pixel centres) to `oh×ow`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if (h, w) == (oh, ow) {
            return Ok(x);
        }
        let out = tensor::resize_bilinear(self.value(x).data(), c, h, w, oh, ow);
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push(value, Op::Resize(x), rg))
    }

    /// Concatenate C×H×W tensors along channels.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let parts: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let value = Tensor::concat_channels(&parts)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::Concat(xs.to_vec()), rg))
    }

    /// Transpose C×H×W into H×W×C.
    pub fn to_hwc(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = src[ch * hw + p];
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[h, w, c], out)?;
        Ok(self.push(value, Op::ToHwc(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `y = x·wᵀ + b` with `x: N×D`, `w: O×D`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let (o, wd) = self.value(w).dims2()?;
        if wd != d {
            return Err(Error::Shape(format!(
                "linear weight {}×{} vs input width {}",
                o, wd, d
            )));
        }
        let mut out = vec![0.0; n * o];
        tensor::gemm(
            n,
            d,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != o {
                return Err(Error::Shape("linear bias length".into()));
            }
            for row in out.chunks_mut(o) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let value = Tensor::new(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Softmax over the leading axis, independently for every trailing
    /// position (per-pixel class distribution for a C×H×W map).
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let m = t.len() / c;
        let src = t.data();
        let mut out = vec![0.0; t.len()];
        for p in 0..m {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(src[ch * m + p]);
            }
            let mut s = 0.0;
            for ch in 0..c {
                let e = (src[ch * m + p] - mx).exp();
                out[ch * m + p] = e;
                s += e;
            }
            for ch in 0..c {
                out[ch * m + p] /= s;
            }
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SoftmaxChannels(x), rg)
    }

    /// Select rows of an `N×D` tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape(format!("row {} out of {}", r, n)));
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[rows.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Max RoI pooling of a C×H×W feature map with the given stride into
    /// `N×C×out×out` blocks.
    pub fn roi_pool(&mut self, x: Var, rois: &[Box], stride: usize, out: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let n = rois.len();
        let mut vals = vec![0.0; n * c * out * out];
        let mut argmax = vec![0usize; vals.len()];
        for (r, roi) in rois.iter().enumerate() {
            let (ys, ye) = roi_span(roi.y1, roi.y2, stride, h);
            let (xs, xe) = roi_span(roi.x1, roi.x2, stride, w);
            let (lh, lw) = (ye - ys, xe - xs);
            for ch in 0..c {
                for py in 0..out {
                    let by0 = ys + (py * lh) / out;
                    let by1 = ys + ((py + 1) * lh).div_ceil(out);
                    for px in 0..out {
                        let bx0 = xs + (px * lw) / out;
                        let bx1 = xs + ((px + 1) * lw).div_ceil(out);
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for y in by0..by1 {
                            for xx in bx0..bx1 {
                                let i = (ch * h + y) * w + xx;
                                if src[i] > best {
                                    best = src[i];
                                    bi = i;
                                }
                            }
                        }
                        let o = ((r * c + ch) * out + py) * out + px;
                        vals[o] = best;
                        argmax[o] = bi;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        let value = Tensor::new(&[n, c, out, out], vals)?;
        Ok(self.push(value, Op::RoiPool { x, argmax }, rg))
    }

    /// Identity on values; gradients never flow through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Decode `N×4` deltas (scaled by `stds`) against anchors into `N×4`
    /// corner boxes. Log-size deltas are clamped to [`MAX_LOG_SCALE`].
    pub fn decode_boxes(&mut self, deltas: Var, anchors: &[Box], stds: [f64; 4]) -> Result<Var> {
        let (n, d) = self.value(deltas).dims2()?;
        if d != 4 || n != anchors.len() {
            return Err(Error::Shape("decode_boxes expects N×4 deltas per anchor".into()));
        }
        let src = self.value(deltas).data();
        let mut out = Vec::with_capacity(n * 4);
        for (i, a) in anchors.iter().enumerate() {
            let t = [
                src[4 * i] * stds[0],
                src[4 * i + 1] * stds[1],
                src[4 * i + 2] * stds[2],
                src[4 * i + 3] * stds[3],
            ];
            out.extend_from_slice(&crate::boxes::decode_box_clamped(&t, a).to_array());
        }
        let rg = self.rg(&[deltas]);
        let value = Tensor::new(&[n, 4], out)?;
        Ok(self.push(
            value,
            Op::BoxDecode {
                deltas,
                anchors: anchors.to_vec(),
                stds,
            },
            rg,
        ))
    }

    /// Clamp `N×4` corner boxes to `[0,width]×[0,height]`.
    pub fn clip_boxes(&mut self, x: Var, width: f64, height: f64) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        if d != 4 {
            return Err(Error::Shape("clip_boxes expects N×4".into()));
        }
        let value = Tensor::from_fn(self.value(x).shape(), |i| {
            let v = self.value(x).data()[i];
            let hi = if i % 2 == 0 { width } else { height };
            v.clamp(0.0, hi)
        });
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ClipBoxes { x }, rg))
    }

    /// Regression targets `encode(gt_i, box_i) / stds` as a differentiable
    /// function of the `N×4` boxes.
    pub fn encode_targets(&mut self, boxes: Var, gts: &[Box], stds: [f64; 4]) -> Result<Var> {
        let (n, d) = self.value(boxes).dims2()?;
        if d != 4 || n != gts.len() {
            return Err(Error::Shape("encode_targets expects N×4 boxes per gt".into()));
        }
        let src = self.value(boxes).data();
        let mut out = Vec::with_capacity(4 * n);
        for (i, g) in gts.iter().enumerate() {
            let b = Box::from_slice(&src[4 * i..4 * i + 4]);
            let t = crate::boxes::encode_box(g, &b)?;
            out.extend((0..4).map(|k| t[k] / stds[k]));
        }
        let rg = self.rg(&[boxes]);
        let value = Tensor::new(&[n, 4], out)?;
        Ok(self.push(
            value,
            Op::BoxEncode {
                boxes,
                gts: gts.to_vec(),
                stds,
            },
            rg,
        ))
    }

    /// Record a scalar whose gradient with respect to each input has already
    /// been computed; used for fused loss kernels.
    pub fn scalar_with_grads(&mut self, inputs: &[Var], value: f64, grads: Vec<Tensor>) -> Var {
        debug_assert_eq!(inputs.len(), grads.len());
        let rg = self.rg(inputs);
        self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        )
    }

    /// `Σ wᵢ·xᵢ` over scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|(x, w)| self.value(*x).data()[0] * w).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Back-propagate from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let shaped = |shape: &[usize], data: Vec<f64>| Tensor::new(shape, data).expect("grad shape");
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv {
                x,
                w,
                b,
                k,
                pad,
                cols,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let hw = h * wd;
                let ws = self.value(*w).shape().to_vec();
                let o = ws[0];
                let kk = c * k * k;
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let gb: Vec<f64> = gy.data().chunks(hw).map(|r| r.iter().sum()).collect();
                        self.accumulate(grads, *b, shaped(&[o], gb));
                    }
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; o * kk];
                    let input = if *k == 1 { self.value(*x).data() } else { cols };
                    tensor::gemm(o, hw, kk, gy.data(), false, input, true, &mut gw, 0.0);
                    self.accumulate(grads, *w, shaped(&ws, gw));
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; kk * hw];
                    tensor::gemm(kk, o, hw, self.value(*w).data(), true, gy.data(), false, &mut gcols, 0.0);
                    let gx = if *k == 1 {
                        gcols
                    } else {
                        tensor::col2im(&gcols, c, h, wd, *k, *pad)
                    };
                    self.accumulate(grads, *x, shaped(&xs, gx));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let g: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, shaped(xv.shape(), g));
            }
            Op::MaxPool2 { x, argmax } | Op::RoiPool { x, argmax } => {
                let xv = self.value(*x);
                let mut g = vec![0.0; xv.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += gy.data()[o];
                }
                self.accumulate(grads, *x, shaped(xv.shape(), g));
            }
            Op::AvgPool { x, k } => {
                let xs = self.value(*x).shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            g[(ch * h + y) * w + xx] = gy.data()[(ch * oh + y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, shaped(&xs, g));
            }
            Op::Resize(x) => {
                let xs = self.value(*x).shape().to_vec();
                let ys = gy.shape();
                let g = tensor::resize_bilinear_backward(gy.data(), xs[0], xs[1], xs[2], ys[1], ys[2]);
                self.accumulate(grads, *x, shaped(&xs, g));
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for v in xs {
                    let t = self.value(*v);
                    let n = t.len();
                    if self.requires_grad(*v) {
                        let g = gy.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, *v, shaped(t.shape(), g));
                    }
                    offset += n;
                }
            }
            Op::ToHwc(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let mut g = vec![0.0; c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        g[ch * hw + p] = gy.data()[p * c + ch];
                    }
                }
                self.accumulate(grads, *x, shaped(&xs, g));
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, shaped(&xs, gy.data().to_vec()));
            }
            Op::Linear { x, w, b } => {
                let (n, d) = self.value(*x).dims2().expect("rank 2");
                let o = self.value(*w).shape()[0];
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; o];
                        for row in gy.data().chunks(o) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, shaped(&[o], gb));
                    }
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; o * d];
                    tensor::gemm(o, n, d, gy.data(), true, self.value(*x).data(), false, &mut gw, 0.0);
                    self.accumulate(grads, *w, shaped(&[o, d], gw));
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; n * d];
                    tensor::gemm(n, o, d, gy.data(), false, self.value(*w).data(), false, &mut gx, 0.0);
                    self.accumulate(grads, *x, shaped(&[n, d], gx));
                }
            }
            Op::Sigmoid(x) => {
                let g: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, shaped(node.value.shape(), g));
            }
            Op::SoftmaxChannels(x) => {
                let s = node.value.data();
                let c = node.value.shape()[0];
                let m = s.len() / c;
                let mut g = vec![0.0; s.len()];
                for p in 0..m {
                    let dot: f64 = (0..c).map(|ch| s[ch * m + p] * gy.data()[ch * m + p]).sum();
                    for ch in 0..c {
                        let i = ch * m + p;
                        g[i] = s[i] * (gy.data()[i] - dot);
                    }
                }
                self.accumulate(grads, *x, shaped(node.value.shape(), g));
            }
            Op::GatherRows { x, rows } => {
                let xs = self.value(*x).shape().to_vec();
                let d = xs[1];
                let mut g = vec![0.0; xs[0] * d];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        g[r * d + j] += gy.data()[i * d + j];
                    }
                }
                self.accumulate(grads, *x, shaped(&xs, g));
            }
            Op::BoxDecode {
                deltas,
                anchors,
                stds,
            } => {
                let dv = self.value(*deltas).data();
                let mut g = vec![0.0; dv.len()];
                for (i, a) in anchors.iter().enumerate() {
                    let (aw, ah) = (a.width(), a.height());
                    let gyi = &gy.data()[4 * i..4 * i + 4];
                    let tw = dv[4 * i + 2] * stds[2];
                    let th = dv[4 * i + 3] * stds[3];
                    let w = tw.min(MAX_LOG_SCALE).exp() * aw;
                    let h = th.min(MAX_LOG_SCALE).exp() * ah;
                    // x1 = cx - w/2, x2 = cx + w/2 with cx = acx + dx·aw.
                    g[4 * i] = (gyi[0] + gyi[2]) * aw * stds[0];
                    g[4 * i + 1] = (gyi[1] + gyi[3]) * ah * stds[1];
                    if tw < MAX_LOG_SCALE {
                        g[4 * i + 2] = (gyi[2] - gyi[0]) * 0.5 * w * stds[2];
                    }
                    if th < MAX_LOG_SCALE {
                        g[4 * i + 3] = (gyi[3] - gyi[1]) * 0.5 * h * stds[3];
                    }
                }
                let shape = self.value(*deltas).shape().to_vec();
                self.accumulate(grads, *deltas, shaped(&shape, g));
            }
            Op::ClipBoxes { x } => {
                let xv = self.value(*x);
                let g: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gy.data())
                    .map(|((&a, &b), &g)| if a == b { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, shaped(xv.shape(), g));
            }
            Op::BoxEncode { boxes, gts, stds } => {
                let bv = self.value(*boxes).data();
                let mut g = vec![0.0; bv.len()];
                for (i, gt) in gts.iter().enumerate() {
                    let b = &bv[4 * i..4 * i + 4];
                    let gyi = &gy.data()[4 * i..4 * i + 4];
                    let (gcx, gcy) = gt.center();
                    for axis in 0..2 {
                        let (lo, hi) = (b[axis], b[axis + 2]);
                        let size = hi - lo;
                        let centre = 0.5 * (lo + hi);
                        let gc = if axis == 0 { gcx } else { gcy };
                        // t_c = (gc - centre)/size, t_s = ln(gsize) - ln(size)
                        let off = gc - centre;
                        let dtc_dlo = -0.5 / size + off / (size * size);
                        let dtc_dhi = -0.5 / size - off / (size * size);
                        let dts_dlo = 1.0 / size;
                        let dts_dhi = -1.0 / size;
                        let gc_t = gyi[axis] / stds[axis];
                        let gs_t = gyi[axis + 2] / stds[axis + 2];
                        g[4 * i + axis] = gc_t * dtc_dlo + gs_t * dts_dlo;
                        g[4 * i + axis + 2] = gc_t * dtc_dhi + gs_t * dts_dhi;
                    }
                }
                let shape = self.value(*boxes).shape().to_vec();
                self.accumulate(grads, *boxes, shaped(&shape, g));
            }
            Op::Scalar { inputs, grads: local } => {
                let s = gy.data()[0];
                for (v, lg) in inputs.iter().zip(local) {
                    if self.requires_grad(*v) {
                        self.accumulate(grads, *v, lg.map(|g| g * s));
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let s = gy.data()[0];
                for (v, w) in terms {
                    self.accumulate(grads, *v, Tensor::scalar(s * w));
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Map a pixel interval `[lo, hi)` onto a non-empty cell range of a feature
/// axis with the given stride and length.
fn roi_span(lo: f64, hi: f64, stride: usize, len: usize) -> (usize, usize) {
    let s = stride as f64;
    let start = (lo / s).floor().max(0.0) as usize;
    let end = ((hi / s).ceil().max(0.0) as usize).min(len);
    // Degenerate or out-of-range spans collapse onto the nearest valid cell.
    let start = start.min(len - 1);
    let end = end.max(start + 1);
    (start, end)
}
