//! Reverse-mode autodiff over a flat tape.
//!
//! A [`Graph`] records every operation as a node holding its output tensor;
//! parents always precede children, so [`Graph::backward`] is a single
//! reverse sweep. Gradients are accumulated in node index order, which makes
//! backpropagation bit-for-bit deterministic.
//!
//! Convolution is plain cross-correlation (no kernel flip). The stride-1 path
//! is written as contiguous row updates because the recurrent cells spend
//! almost all of their time there.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{err_invalid, err_shape};
use crate::tensor::Tensor;
use crate::{math, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Probability floor used by cross-entropy and entropy computations.
pub const PROB_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    Linear,
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Hadamard,
    Softmax,
    ConcatChannels,
    Upsample2x,
    AvgPool2x,
    GlobalAvgPool,
    CrossEntropyOneHot { class: usize },
    DotConst { weights: Vec<f64> },
    AbsScalar,
    AffineScalars { coeffs: Vec<f64> },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
}

/// Reverse-mode tape. Build ops forward, then call [`Graph::backward`] on a
/// scalar node to get gradients for every node that influenced it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root w.r.t. the given node, if it was reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
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

    /// Inserts a constant or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, parents, value });
        NodeId(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation of `input` `[C_in, H, W]` with `kernels`
    /// `[C_out, C_in, k, k]`, plus an optional per-channel bias `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(kernels);
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 3 {
            return Err(err_shape!("conv2d", "input must be [C,H,W], got {}", x.shape_string()));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(err_shape!(
                "conv2d",
                "kernels must be [C_out,C_in,k,k], got {}",
                w.shape_string()
            ));
        }
        let (cin, h, width) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin {
            return Err(err_shape!(
                "conv2d",
                "kernel C_in = {} but input has {} channels",
                ws[1],
                cin
            ));
        }
        if k % 2 == 0 {
            return Err(err_invalid!("conv2d", "kernel size {k} must be odd"));
        }
        if stride == 0 {
            return Err(err_invalid!("conv2d", "stride must be >= 1"));
        }
        let oh = out_dim(h, k, stride, padding)
            .ok_or_else(|| err_invalid!("conv2d", "height {h} incompatible with k={k} stride={stride} padding={padding}"))?;
        let ow = out_dim(width, k, stride, padding)
            .ok_or_else(|| err_invalid!("conv2d", "width {width} incompatible with k={k} stride={stride} padding={padding}"))?;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(err_shape!(
                    "conv2d",
                    "bias must be [{cout}], got {}",
                    self.value(b).shape_string()
                ));
            }
        }

        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let out = conv2d_forward(
            self.value(input),
            self.value(kernels),
            bias_data.as_deref(),
            stride,
            padding,
            oh,
            ow,
        );
        let mut parents = vec![input, kernels];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(Op::Conv2d { stride, padding }, parents, out))
    }

    /// `weight[m,n] . input[n] (+ bias[m])`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.shape().len() != 1 {
            return Err(err_shape!("linear", "input must be a vector, got {}", x.shape_string()));
        }
        if w.shape().len() != 2 || w.shape()[1] != x.shape()[0] {
            return Err(err_shape!(
                "linear",
                "weight {} incompatible with input {}",
                w.shape_string(),
                x.shape_string()
            ));
        }
        let m = w.shape()[0];
        if let Some(b) = bias {
            if self.value(b).shape() != [m] {
                return Err(err_shape!(
                    "linear",
                    "bias must be [{m}], got {}",
                    self.value(b).shape_string()
                ));
            }
        }
        let n = x.shape()[0];
        let mut out = vec![0.0; m];
        let wd = w.data();
        let xd = x.data();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wd[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(xd.iter()) {
                acc += wv * xv;
            }
            *o = acc;
        }
        if let Some(b) = bias {
            for (o, bv) in out.iter_mut().zip(self.value(b).data().iter()) {
                *o += bv;
            }
        }
        let mut parents = vec![input, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(Op::Linear, parents, Tensor::from_vec(out)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| math::sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Sigmoid, vec![x], Tensor::new(&shape, out).expect("same shape"))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| math::tanh(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh, vec![x], Tensor::new(&shape, out).expect("same shape"))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Relu, vec![x], Tensor::new(&shape, out).expect("same shape"))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add, vec![a, b], Tensor::new(&shape, out).expect("same shape")))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shape_check("hadamard", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Hadamard, vec![a, b], Tensor::new(&shape, out).expect("same shape")))
    }

    fn binary_shape_check(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(err_shape!(
                op,
                "operands {} vs {}",
                self.value(a).shape_string(),
                self.value(b).shape_string()
            ));
        }
        Ok(())
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(err_shape!("softmax", "input must be a vector, got {}", t.shape_string()));
        }
        if !t.is_finite() {
            return Err(err_invalid!("softmax", "logits must be finite"));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = t.data().iter().map(|&v| math::exp(v - max)).collect();
        let sum: f64 = out.iter().sum();
        for v in out.iter_mut() {
            *v /= sum;
        }
        Ok(self.push(Op::Softmax, vec![x], Tensor::from_vec(out)))
    }

    /// Channel-concatenates CHW maps that share spatial dimensions.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(err_invalid!("concat", "needs at least one input"));
        }
        let (h, w) = {
            let first = self.value(xs[0]);
            if first.shape().len() != 3 {
                return Err(err_shape!("concat", "inputs must be [C,H,W], got {}", first.shape_string()));
            }
            (first.shape()[1], first.shape()[2])
        };
        let mut channels = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(err_shape!(
                    "concat",
                    "expected [_,{h},{w}], got {}",
                    self.value(x).shape_string()
                ));
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let out = Tensor::new(&[channels, h, w], data).expect("counted");
        Ok(self.push(Op::ConcatChannels, xs.to_vec(), out))
    }

    /// Nearest-neighbor 2x spatial upsampling of a CHW map.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(err_shape!("upsample2x", "input must be [C,H,W], got {}", t.shape_string()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; c * oh * ow];
        let d = t.data();
        for ci in 0..c {
            for y in 0..h {
                let src = &d[ci * h * w + y * w..ci * h * w + (y + 1) * w];
                for dy in 0..2 {
                    let row = &mut out[ci * oh * ow + (2 * y + dy) * ow..ci * oh * ow + (2 * y + dy + 1) * ow];
                    for (xi, &v) in src.iter().enumerate() {
                        row[2 * xi] = v;
                        row[2 * xi + 1] = v;
                    }
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out).expect("counted");
        Ok(self.push(Op::Upsample2x, vec![x], out))
    }

    /// 2x2 mean pooling with stride 2; spatial dims must be even so the
    /// halving is exact.
    pub fn avg_pool2x(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(err_shape!("avg_pool2x", "input must be [C,H,W], got {}", t.shape_string()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(err_invalid!("avg_pool2x", "spatial dims {h}x{w} must be even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let d = t.data();
        for ci in 0..c {
            for y in 0..oh {
                let top = &d[ci * h * w + 2 * y * w..ci * h * w + (2 * y + 1) * w];
                let bot = &d[ci * h * w + (2 * y + 1) * w..ci * h * w + (2 * y + 2) * w];
                let row = &mut out[ci * oh * ow + y * ow..ci * oh * ow + (y + 1) * ow];
                for (xi, o) in row.iter_mut().enumerate() {
                    *o = 0.25 * (top[2 * xi] + top[2 * xi + 1] + bot[2 * xi] + bot[2 * xi + 1]);
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out).expect("counted");
        Ok(self.push(Op::AvgPool2x, vec![x], out))
    }

    /// Per-channel spatial mean: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(err_shape!("gap", "input must be [C,H,W], got {}", t.shape_string()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let plane = h * w;
        let mut out = vec![0.0; c];
        for (ci, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &v in &t.data()[ci * plane..(ci + 1) * plane] {
                acc += v;
            }
            *o = acc / plane as f64;
        }
        Ok(self.push(Op::GlobalAvgPool, vec![x], Tensor::from_vec(out)))
    }

    /// `-ln(max(p[class], 1e-12))` for a probability vector `p`.
    pub fn cross_entropy_one_hot(&mut self, p: NodeId, class: usize) -> Result<NodeId> {
        let t = self.value(p);
        if t.shape().len() != 1 || class >= t.shape()[0] {
            return Err(err_invalid!(
                "cross_entropy",
                "class {class} out of range for vector {}",
                t.shape_string()
            ));
        }
        let v = -math::ln(t.data()[class].max(PROB_EPS));
        Ok(self.push(Op::CrossEntropyOneHot { class }, vec![p], Tensor::scalar(v)))
    }

    /// Dot product with a constant vector; used for expectation-style scalars.
    pub fn dot_const(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let t = self.value(x);
        if t.shape().len() != 1 || t.shape()[0] != weights.len() {
            return Err(err_shape!(
                "dot_const",
                "input {} vs {} weights",
                t.shape_string(),
                weights.len()
            ));
        }
        let v: f64 = t.data().iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
        Ok(self.push(Op::DotConst { weights }, vec![x], Tensor::scalar(v)))
    }

    pub fn abs_scalar(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.numel() != 1 {
            return Err(err_shape!("abs_scalar", "input must be scalar, got {}", t.shape_string()));
        }
        let v = math::abs(t.item());
        Ok(self.push(Op::AbsScalar, vec![x], Tensor::scalar(v)))
    }

    /// `sum_i coeffs[i] * xs[i] + bias` over scalar nodes, accumulated in
    /// argument order with the bias added last. Coefficients are constants:
    /// no gradient flows into them.
    pub fn affine_scalars(&mut self, xs: &[NodeId], coeffs: &[f64], bias: f64) -> Result<NodeId> {
        if xs.len() != coeffs.len() {
            return Err(err_invalid!(
                "affine_scalars",
                "{} nodes vs {} coefficients",
                xs.len(),
                coeffs.len()
            ));
        }
        let mut v = 0.0;
        for (&x, &c) in xs.iter().zip(coeffs.iter()) {
            let t = self.value(x);
            if t.numel() != 1 {
                return Err(err_shape!("affine_scalars", "inputs must be scalars, got {}", t.shape_string()));
            }
            v += c * t.item();
        }
        v += bias;
        let op = Op::AffineScalars { coeffs: coeffs.to_vec() };
        Ok(self.push(op, xs.to_vec(), Tensor::scalar(v)))
    }

    /// Reverse sweep from a scalar `root`. Returns one gradient per reached
    /// node; unreached nodes stay `None`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(err_invalid!(
                "backward",
                "root must be scalar, got {}",
                self.value(root).shape_string()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                self.backward_node(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let parent_val = |i: usize| &self.nodes[node.parents[i].0].value;
        let mut add_to = |i: usize, update: &dyn Fn(&mut [f64])| {
            let pid = node.parents[i].0;
            let slot = grads[pid].get_or_insert_with(|| Tensor::zeros(self.nodes[pid].value.shape()));
            update(slot.data_mut());
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride, padding } => {
                let x = parent_val(0);
                let w = parent_val(1);
                let in_shape = [x.shape()[0], x.shape()[1], x.shape()[2]];
                add_to(0, &|dx| conv2d_backward_input(dx, &in_shape, w, gout, *stride, *padding));
                add_to(1, &|dw| conv2d_backward_kernels(x, dw, gout, *stride, *padding));
                if node.parents.len() == 3 {
                    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);
                    add_to(2, &|db| {
                        for (oc, dbv) in db.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for &g in &gout.data()[oc * oh * ow..(oc + 1) * oh * ow] {
                                acc += g;
                            }
                            *dbv += acc;
                        }
                    });
                }
            }
            Op::Linear => {
                let x = parent_val(0);
                let w = parent_val(1);
                let (m, n) = (w.shape()[0], w.shape()[1]);
                let g = gout.data();
                add_to(0, &|dx| {
                    for (i, &gv) in g.iter().enumerate().take(m) {
                        let row = &w.data()[i * n..(i + 1) * n];
                        for (d, wv) in dx.iter_mut().zip(row.iter()) {
                            *d += gv * wv;
                        }
                    }
                });
                add_to(1, &|dw| {
                    for (i, &gv) in g.iter().enumerate().take(m) {
                        let row = &mut dw[i * n..(i + 1) * n];
                        for (d, xv) in row.iter_mut().zip(x.data().iter()) {
                            *d += gv * xv;
                        }
                    }
                });
                if node.parents.len() == 3 {
                    add_to(2, &|db| {
                        for (d, gv) in db.iter_mut().zip(g.iter()) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Sigmoid => {
                let y = node.value.data();
                add_to(0, &|dx| {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y.iter()).zip(gout.data().iter()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh => {
                let y = node.value.data();
                add_to(0, &|dx| {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y.iter()).zip(gout.data().iter()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu => {
                let x = parent_val(0).data();
                add_to(0, &|dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(x.iter()).zip(gout.data().iter()) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Add => {
                for i in 0..2 {
                    add_to(i, &|dx| {
                        for (d, gv) in dx.iter_mut().zip(gout.data().iter()) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Hadamard => {
                let a = parent_val(0).data();
                let b = parent_val(1).data();
                add_to(0, &|dx| {
                    for ((d, &bv), &gv) in dx.iter_mut().zip(b.iter()).zip(gout.data().iter()) {
                        *d += gv * bv;
                    }
                });
                add_to(1, &|dx| {
                    for ((d, &av), &gv) in dx.iter_mut().zip(a.iter()).zip(gout.data().iter()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Softmax => {
                let y = node.value.data();
                let g = gout.data();
                let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                add_to(0, &|dx| {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(y.iter()).zip(g.iter()) {
                        *d += yv * (gv - dot);
                    }
                });
            }
            Op::ConcatChannels => {
                let mut offset = 0;
                for i in 0..node.parents.len() {
                    let numel = parent_val(i).numel();
                    let slice = &gout.data()[offset..offset + numel];
                    add_to(i, &|dx| {
                        for (d, gv) in dx.iter_mut().zip(slice.iter()) {
                            *d += gv;
                        }
                    });
                    offset += numel;
                }
            }
            Op::Upsample2x => {
                let s = parent_val(0).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * 2, w * 2);
                let g = gout.data();
                add_to(0, &|dx| {
                    for ci in 0..c {
                        for y in 0..h {
                            let row = &mut dx[ci * h * w + y * w..ci * h * w + (y + 1) * w];
                            for dy in 0..2 {
                                let src = &g[ci * oh * ow + (2 * y + dy) * ow..ci * oh * ow + (2 * y + dy + 1) * ow];
                                for (xi, d) in row.iter_mut().enumerate() {
                                    *d += src[2 * xi] + src[2 * xi + 1];
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2x => {
                let s = parent_val(0).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let g = gout.data();
                add_to(0, &|dx| {
                    for ci in 0..c {
                        for y in 0..oh {
                            let grow = &g[ci * oh * ow + y * ow..ci * oh * ow + (y + 1) * ow];
                            let (top, bot) = dx[ci * h * w + 2 * y * w..ci * h * w + (2 * y + 2) * w]
                                .split_at_mut(w);
                            for (xi, &gv) in grow.iter().enumerate() {
                                let q = 0.25 * gv;
                                top[2 * xi] += q;
                                top[2 * xi + 1] += q;
                                bot[2 * xi] += q;
                                bot[2 * xi + 1] += q;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool => {
                let s = parent_val(0).shape();
                let plane = s[1] * s[2];
                let inv = 1.0 / plane as f64;
                let g = gout.data();
                add_to(0, &|dx| {
                    for ci in 0..s[0] {
                        let gv = g[ci] * inv;
                        for d in &mut dx[ci * plane..(ci + 1) * plane] {
                            *d += gv;
                        }
                    }
                });
            }
            Op::CrossEntropyOneHot { class } => {
                let p = parent_val(0).data()[*class];
                let g = gout.item();
                add_to(0, &|dx| {
                    // Clamped below PROB_EPS: the loss is constant there.
                    if p > PROB_EPS {
                        dx[*class] += -g / p;
                    }
                });
            }
            Op::DotConst { weights } => {
                let g = gout.item();
                add_to(0, &|dx| {
                    for (d, wv) in dx.iter_mut().zip(weights.iter()) {
                        *d += g * wv;
                    }
                });
            }
            Op::AbsScalar => {
                let x = parent_val(0).item();
                let g = gout.item();
                let sign = if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                add_to(0, &|dx| dx[0] += g * sign);
            }
            Op::AffineScalars { coeffs } => {
                let g = gout.item();
                for (i, &c) in coeffs.iter().enumerate() {
                    add_to(i, &|dx| dx[0] += g * c);
                }
            }
        }
    }
}

fn out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return None;
    }
    let span = padded - k;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

/// Adds one 3x3 pad-1 correlation of a single input plane into an output
/// row; the vertical borders pass a shared zero row. All nine taps are fused
/// so each output element is read and written once per input plane.
#[inline]
fn conv3x3_row(orow: &mut [f64], a: &[f64], m: &[f64], b: &[f64], w9: &[f64; 9]) {
    let w = orow.len();
    let edge = |x: usize, lo: bool, hi: bool| -> f64 {
        let mut acc = 0.0;
        if lo {
            acc += w9[0] * a[x - 1] + w9[3] * m[x - 1] + w9[6] * b[x - 1];
        }
        acc += w9[1] * a[x] + w9[4] * m[x] + w9[7] * b[x];
        if hi {
            acc += w9[2] * a[x + 1] + w9[5] * m[x + 1] + w9[8] * b[x + 1];
        }
        acc
    };
    orow[0] += edge(0, false, w > 1);
    if w > 1 {
        orow[w - 1] += edge(w - 1, true, false);
    }
    if w <= 2 {
        return;
    }
    for (i, o) in orow[1..w - 1].iter_mut().enumerate() {
        let x = i + 1;
        *o += w9[0] * a[x - 1]
            + w9[1] * a[x]
            + w9[2] * a[x + 1]
            + w9[3] * m[x - 1]
            + w9[4] * m[x]
            + w9[5] * m[x + 1]
            + w9[6] * b[x - 1]
            + w9[7] * b[x]
            + w9[8] * b[x + 1];
    }
}

/// Two-output variant of [`conv3x3_row`]: the nine neighborhood loads are
/// shared by both kernels, which roughly doubles arithmetic per load.
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv3x3_row2(
    orow0: &mut [f64],
    orow1: &mut [f64],
    a: &[f64],
    m: &[f64],
    b: &[f64],
    w0: &[f64; 9],
    w1: &[f64; 9],
) {
    let w = orow0.len();
    let edge = |w9: &[f64; 9], x: usize, lo: bool, hi: bool| -> f64 {
        let mut acc = 0.0;
        if lo {
            acc += w9[0] * a[x - 1] + w9[3] * m[x - 1] + w9[6] * b[x - 1];
        }
        acc += w9[1] * a[x] + w9[4] * m[x] + w9[7] * b[x];
        if hi {
            acc += w9[2] * a[x + 1] + w9[5] * m[x + 1] + w9[8] * b[x + 1];
        }
        acc
    };
    orow0[0] += edge(w0, 0, false, w > 1);
    orow1[0] += edge(w1, 0, false, w > 1);
    if w > 1 {
        orow0[w - 1] += edge(w0, w - 1, true, false);
        orow1[w - 1] += edge(w1, w - 1, true, false);
    }
    if w <= 2 {
        return;
    }
    let inner0 = &mut orow0[1..w - 1];
    let inner1 = &mut orow1[1..w - 1];
    for (i, (o0, o1)) in inner0.iter_mut().zip(inner1.iter_mut()).enumerate() {
        let x = i + 1;
        let (al, ac, ar) = (a[x - 1], a[x], a[x + 1]);
        let (ml, mc, mr) = (m[x - 1], m[x], m[x + 1]);
        let (bl, bc, br) = (b[x - 1], b[x], b[x + 1]);
        *o0 += w0[0] * al + w0[1] * ac + w0[2] * ar + w0[3] * ml + w0[4] * mc + w0[5] * mr
            + w0[6] * bl + w0[7] * bc + w0[8] * br;
        *o1 += w1[0] * al + w1[1] * ac + w1[2] * ar + w1[3] * ml + w1[4] * mc + w1[5] * mr
            + w1[6] * bl + w1[7] * bc + w1[8] * br;
    }
}

fn kernel9(kd: &[f64], oc: usize, cin: usize, ic: usize) -> &[f64; 9] {
    kd[(oc * cin + ic) * 9..(oc * cin + ic) * 9 + 9]
        .try_into()
        .expect("3x3 kernel")
}

/// Fused path for the model's 3x3 stride-1 pad-1 convolutions, two output
/// channels at a time.
fn conv3x3_s1p1_forward(input: &Tensor, kernels: &Tensor, bias: Option<&[f64]>) -> Tensor {
    let xs = input.shape();
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let cout = kernels.shape()[0];
    let xd = input.data();
    let kd = kernels.data();
    let mut out = vec![0.0; cout * h * w];
    let zero_row = vec![0.0; w];

    if let Some(b) = bias {
        for oc in 0..cout {
            out[oc * h * w..(oc + 1) * h * w].fill(b[oc]);
        }
    }

    let mut oc = 0;
    while oc < cout {
        if oc + 1 < cout {
            let (head, tail) = out.split_at_mut((oc + 1) * h * w);
            let p0 = &mut head[oc * h * w..];
            let p1 = &mut tail[..h * w];
            for ic in 0..cin {
                let ip = &xd[ic * h * w..(ic + 1) * h * w];
                let w0 = kernel9(kd, oc, cin, ic);
                let w1 = kernel9(kd, oc + 1, cin, ic);
                for y in 0..h {
                    let a = if y > 0 { &ip[(y - 1) * w..y * w] } else { &zero_row[..] };
                    let m = &ip[y * w..(y + 1) * w];
                    let b = if y + 1 < h { &ip[(y + 1) * w..(y + 2) * w] } else { &zero_row[..] };
                    let (r0, r1) = (&mut p0[y * w..(y + 1) * w], &mut p1[y * w..(y + 1) * w]);
                    conv3x3_row2(r0, r1, a, m, b, w0, w1);
                }
            }
            oc += 2;
        } else {
            let oplane = &mut out[oc * h * w..(oc + 1) * h * w];
            for ic in 0..cin {
                let ip = &xd[ic * h * w..(ic + 1) * h * w];
                let w9 = kernel9(kd, oc, cin, ic);
                for y in 0..h {
                    let a = if y > 0 { &ip[(y - 1) * w..y * w] } else { &zero_row[..] };
                    let m = &ip[y * w..(y + 1) * w];
                    let b = if y + 1 < h { &ip[(y + 1) * w..(y + 2) * w] } else { &zero_row[..] };
                    conv3x3_row(&mut oplane[y * w..(y + 1) * w], a, m, b, w9);
                }
            }
            oc += 1;
        }
    }
    Tensor::new(&[cout, h, w], out).expect("counted")
}

fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let xs = input.shape();
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let cout = kernels.shape()[0];
    let k = kernels.shape()[2];
    if k == 3 && stride == 1 && padding == 1 {
        return conv3x3_s1p1_forward(input, kernels, bias);
    }
    let xd = input.data();
    let kd = kernels.data();
    let mut out = vec![0.0; cout * oh * ow];

    // Per-tap output column ranges are row-independent; hoist them.
    let tap_ranges: Vec<(usize, usize)> =
        (0..k).map(|kx| ox_range(ow, w, kx, stride, padding)).collect();

    for oc in 0..cout {
        let oplane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = bias {
            oplane.fill(b[oc]);
        }
        for ic in 0..cin {
            let iplane = &xd[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kd[((oc * cin + ic) * k + ky) * k + kx];
                    let (ox0, ox1) = tap_ranges[kx];
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut oplane[oy * ow + ox0..oy * ow + ox1];
                        if stride == 1 {
                            let base = ox0 + kx - padding;
                            let islice = &irow[base..base + (ox1 - ox0)];
                            for (o, iv) in orow.iter_mut().zip(islice.iter()) {
                                *o += wv * iv;
                            }
                        } else {
                            for (d, o) in orow.iter_mut().enumerate() {
                                let ix = (ox0 + d) * stride + kx - padding;
                                *o += wv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out).expect("counted")
}

/// Valid output-x range for a kernel column: `ix = ox*stride + kx - padding`
/// must land in `[0, w)`.
#[inline]
fn ox_range(ow: usize, w: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if kx >= padding { 0 } else { (padding - kx).div_ceil(stride) };
    let hi_num = w + padding;
    let hi = if hi_num > kx {
        (((hi_num - kx - 1) / stride) + 1).min(ow)
    } else {
        0
    };
    (lo.min(ow), hi)
}

fn conv2d_backward_input(
    dx: &mut [f64],
    in_shape: &[usize; 3],
    kernels: &Tensor,
    gout: &Tensor,
    stride: usize,
    padding: usize,
) {
    let ks = kernels.shape();
    let (cout, cin, k) = (ks[0], ks[1], ks[2]);
    let gs = gout.shape();
    let (oh, ow) = (gs[1], gs[2]);
    let (h_in, w_in) = (in_shape[1], in_shape[2]);
    let plane = h_in * w_in;
    let gd = gout.data();
    let kd = kernels.data();

    if k == 3 && stride == 1 && padding == 1 {
        // d_input is the correlation of the output gradient with the
        // 180-degree-rotated kernel; reuse the fused row kernels, two input
        // channels at a time so the gradient rows are loaded once per pair.
        let zero_row = vec![0.0; w_in];
        let rot = |oc: usize, ic: usize| -> [f64; 9] {
            let w9 = kernel9(kd, oc, cin, ic);
            [w9[8], w9[7], w9[6], w9[5], w9[4], w9[3], w9[2], w9[1], w9[0]]
        };
        let mut ic = 0;
        while ic < cin {
            if ic + 1 < cin {
                let (head, tail) = dx.split_at_mut((ic + 1) * plane);
                let d0 = &mut head[ic * plane..];
                let d1 = &mut tail[..plane];
                for oc in 0..cout {
                    let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
                    let (r0, r1) = (rot(oc, ic), rot(oc, ic + 1));
                    for y in 0..h_in {
                        let a = if y > 0 { &gplane[(y - 1) * w_in..y * w_in] } else { &zero_row[..] };
                        let m = &gplane[y * w_in..(y + 1) * w_in];
                        let b = if y + 1 < h_in {
                            &gplane[(y + 1) * w_in..(y + 2) * w_in]
                        } else {
                            &zero_row[..]
                        };
                        let (row0, row1) =
                            (&mut d0[y * w_in..(y + 1) * w_in], &mut d1[y * w_in..(y + 1) * w_in]);
                        conv3x3_row2(row0, row1, a, m, b, &r0, &r1);
                    }
                }
                ic += 2;
            } else {
                let dplane = &mut dx[ic * plane..(ic + 1) * plane];
                for oc in 0..cout {
                    let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
                    let r = rot(oc, ic);
                    for y in 0..h_in {
                        let a = if y > 0 { &gplane[(y - 1) * w_in..y * w_in] } else { &zero_row[..] };
                        let m = &gplane[y * w_in..(y + 1) * w_in];
                        let b = if y + 1 < h_in {
                            &gplane[(y + 1) * w_in..(y + 2) * w_in]
                        } else {
                            &zero_row[..]
                        };
                        conv3x3_row(&mut dplane[y * w_in..(y + 1) * w_in], a, m, b, &r);
                    }
                }
                ic += 1;
            }
        }
        return;
    }

    let tap_ranges: Vec<(usize, usize)> =
        (0..k).map(|kx| ox_range(ow, w_in, kx, stride, padding)).collect();

    for oc in 0..cout {
        let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..cin {
            let dplane = &mut dx[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kd[((oc * cin + ic) * k + ky) * k + kx];
                    let (ox0, ox1) = tap_ranges[kx];
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h_in as isize {
                            continue;
                        }
                        let grow = &gplane[oy * ow + ox0..oy * ow + ox1];
                        let drow = &mut dplane[iy as usize * w_in..(iy as usize + 1) * w_in];
                        if stride == 1 {
                            let base = ox0 + kx - padding;
                            for (d, gv) in drow[base..base + (ox1 - ox0)].iter_mut().zip(grow.iter()) {
                                *d += wv * gv;
                            }
                        } else {
                            for (d, gv) in grow.iter().enumerate() {
                                let ix = (ox0 + d) * stride + kx - padding;
                                drow[ix] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernels(input: &Tensor, dw: &mut [f64], gout: &Tensor, stride: usize, padding: usize) {
    let xs = input.shape();
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let gs = gout.shape();
    let (cout, oh, ow) = (gs[0], gs[1], gs[2]);
    let k_sq = dw.len() / (cout * cin);
    let k = int_sqrt(k_sq);
    let xd = input.data();
    let gd = gout.data();

    if k == 3 && stride == 1 && padding == 1 {
        // All nine tap gradients in one pass over the plane: the gradient
        // row is loaded once and feeds nine accumulators.
        let zero_row = vec![0.0; w];
        for oc in 0..cout {
            let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
            for ic in 0..cin {
                let iplane = &xd[ic * h * w..(ic + 1) * h * w];
                let mut acc = [0.0f64; 9];
                for y in 0..h {
                    let a = if y > 0 { &iplane[(y - 1) * w..y * w] } else { &zero_row[..] };
                    let m = &iplane[y * w..(y + 1) * w];
                    let b = if y + 1 < h { &iplane[(y + 1) * w..(y + 2) * w] } else { &zero_row[..] };
                    let grow = &gplane[y * w..(y + 1) * w];
                    // Column edges: taps that reach outside contribute zero.
                    let g0 = grow[0];
                    acc[1] += g0 * a[0];
                    acc[4] += g0 * m[0];
                    acc[7] += g0 * b[0];
                    if w > 1 {
                        acc[2] += g0 * a[1];
                        acc[5] += g0 * m[1];
                        acc[8] += g0 * b[1];
                        let gl = grow[w - 1];
                        acc[0] += gl * a[w - 2];
                        acc[3] += gl * m[w - 2];
                        acc[6] += gl * b[w - 2];
                        acc[1] += gl * a[w - 1];
                        acc[4] += gl * m[w - 1];
                        acc[7] += gl * b[w - 1];
                    }
                    for x in 1..w.saturating_sub(1) {
                        let g = grow[x];
                        acc[0] += g * a[x - 1];
                        acc[1] += g * a[x];
                        acc[2] += g * a[x + 1];
                        acc[3] += g * m[x - 1];
                        acc[4] += g * m[x];
                        acc[5] += g * m[x + 1];
                        acc[6] += g * b[x - 1];
                        acc[7] += g * b[x];
                        acc[8] += g * b[x + 1];
                    }
                }
                let base = (oc * cin + ic) * 9;
                for (t, &v) in acc.iter().enumerate() {
                    dw[base + t] += v;
                }
            }
        }
        return;
    }

    let tap_ranges: Vec<(usize, usize)> =
        (0..k).map(|kx| ox_range(ow, w, kx, stride, padding)).collect();

    for oc in 0..cout {
        let gplane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..cin {
            let iplane = &xd[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let (ox0, ox1) = tap_ranges[kx];
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * ow + ox0..oy * ow + ox1];
                        let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                        if stride == 1 {
                            let base = ox0 + kx - padding;
                            acc += dot_unrolled(grow, &irow[base..base + (ox1 - ox0)]);
                        } else {
                            for (d, gv) in grow.iter().enumerate() {
                                let ix = (ox0 + d) * stride + kx - padding;
                                acc += gv * irow[ix];
                            }
                        }
                    }
                    dw[((oc * cin + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so the reduction
/// vectorizes. The summation order is fixed, so results stay reproducible.
#[inline]
fn dot_unrolled(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn int_sqrt(v: usize) -> usize {
    let mut k = 1;
    while k * k < v {
        k += 1;
    }
    k
}
