//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] owns every intermediate value of one forward pass; ops append
//! nodes and evaluate eagerly. [`Graph::backward`] walks the tape once in
//! reverse and returns gradients for every leaf that requires them. Parents
//! always precede children on the tape, so a single reverse sweep suffices.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Field plus a `[1,1,1]` scalar node, broadcast over the field.
    AddScalar(NodeId, NodeId),
    /// Field times a `[1,1,1]` scalar node.
    MulScalar(NodeId, NodeId),
    AddConst(NodeId, T),
    MulConst(NodeId, T),
    Neg(NodeId),
    Recip(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// `sqrt(x)` with the backward denominator clamped away from zero.
    SqrtGuarded(NodeId, T),
    /// Per-pixel softmax over the channel dimension.
    SoftmaxCh(NodeId),
    /// Linear combination of channels with fixed weights -> single channel.
    ChannelDot(NodeId, Vec<T>),
    MeanAll(NodeId),
    ConcatCh(Vec<NodeId>),
    SliceCh {
        x: NodeId,
        from: usize,
        to: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Horizontal backward warp of `src` by `disp`; invalid samples are zero.
    Warp {
        src: NodeId,
        disp: NodeId,
        plan: Arc<kernels::WarpPlan<T>>,
    },
    /// Align-corners bilinear resize.
    Resize(NodeId),
    Corr1d {
        a: NodeId,
        b: NodeId,
        radius: usize,
    },
    CostVolume {
        a: NodeId,
        b: NodeId,
        hypotheses: usize,
    },
    /// Mean smooth-L1 against a constant target, optionally masked.
    SmoothL1 {
        pred: NodeId,
        target: Tensor<T>,
        mask: Option<Tensor<T>>,
        beta: T,
    },
    /// Mean per-pixel softmax cross-entropy against a constant target
    /// distribution over channels.
    CrossEntropy {
        scores: NodeId,
        target: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by node id, produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that collects gradients (parameters, checked inputs).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), self.needs(&[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.needs(&[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.needs(&[a, b]))
    }

    /// `field + scalar` with `scalar` a `[1,1,1]` node.
    pub fn add_scalar(&mut self, field: NodeId, scalar: NodeId) -> NodeId {
        let s = self.value(scalar).item();
        let v = self.value(field).map(|x| x + s);
        self.push(v, Op::AddScalar(field, scalar), self.needs(&[field, scalar]))
    }

    /// `field * scalar` with `scalar` a `[1,1,1]` node.
    pub fn mul_scalar(&mut self, field: NodeId, scalar: NodeId) -> NodeId {
        let s = self.value(scalar).item();
        let v = self.value(field).map(|x| x * s);
        self.push(v, Op::MulScalar(field, scalar), self.needs(&[field, scalar]))
    }

    pub fn add_const(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|v| v + c);
        self.push(v, Op::AddConst(x, c), self.needs(&[x]))
    }

    pub fn mul_const(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::MulConst(x, c), self.needs(&[x]))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| -v);
        self.push(v, Op::Neg(x), self.needs(&[x]))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| T::one() / v);
        self.push(v, Op::Recip(x), self.needs(&[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(v, Op::Relu(x), self.needs(&[x]))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: T) -> NodeId {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(v, Op::LeakyRelu(x, slope), self.needs(&[x]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid_stable);
        self.push(v, Op::Sigmoid(x), self.needs(&[x]))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.tanh());
        self.push(v, Op::Tanh(x), self.needs(&[x]))
    }

    pub fn sqrt_guarded(&mut self, x: NodeId, floor: T) -> NodeId {
        let v = self.value(x).map(|v| v.max(T::zero()).sqrt());
        self.push(v, Op::SqrtGuarded(x, floor), self.needs(&[x]))
    }

    pub fn softmax_ch(&mut self, x: NodeId) -> NodeId {
        let xt = self.value(x);
        let (c, h, w) = (xt.c(), xt.h(), xt.w());
        let data = xt.data();
        let mut out = vec![T::zero(); c * h * w];
        let n = h * w;
        for i in 0..n {
            let mut m = T::neg_infinity();
            for ci in 0..c {
                m = m.max(data[ci * n + i]);
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (data[ci * n + i] - m).exp();
                out[ci * n + i] = e;
                sum = sum + e;
            }
            for ci in 0..c {
                out[ci * n + i] = out[ci * n + i] / sum;
            }
        }
        let v = Tensor::chw(c, h, w, out).expect("softmax shape");
        self.push(v, Op::SoftmaxCh(x), self.needs(&[x]))
    }

    /// `out(0,y,x) = sum_c weights[c] * x(c,y,x)`.
    pub fn channel_dot(&mut self, x: NodeId, weights: Vec<T>) -> NodeId {
        let xt = self.value(x);
        let (c, h, w) = (xt.c(), xt.h(), xt.w());
        assert_eq!(c, weights.len(), "channel_dot weight count");
        let n = h * w;
        let data = xt.data();
        let mut out = vec![T::zero(); n];
        for (ci, &wt) in weights.iter().enumerate() {
            for i in 0..n {
                out[i] = out[i] + wt * data[ci * n + i];
            }
        }
        let v = Tensor::chw(1, h, w, out).expect("channel_dot shape");
        self.push(v, Op::ChannelDot(x, weights), self.needs(&[x]))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::MeanAll(x), self.needs(&[x]))
    }

    pub fn concat_ch(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (h, w) = {
            let t = self.value(parts[0]);
            (t.h(), t.w())
        };
        let mut data = Vec::new();
        let mut c_total = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!((t.h(), t.w()), (h, w), "concat_ch spatial mismatch");
            c_total += t.c();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::chw(c_total, h, w, data).expect("concat shape");
        self.push(v, Op::ConcatCh(parts.to_vec()), self.needs(parts))
    }

    pub fn slice_ch(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let xt = self.value(x);
        let (c, h, w) = (xt.c(), xt.h(), xt.w());
        assert!(from < to && to <= c, "slice_ch range {from}..{to} of {c}");
        let n = h * w;
        let data = xt.data()[from * n..to * n].to_vec();
        let v = Tensor::chw(to - from, h, w, data).expect("slice shape");
        self.push(v, Op::SliceCh { x, from, to }, self.needs(&[x]))
    }

    /// 2-D convolution with zero padding. `w` is `(cout, cin, kh, kw)`,
    /// `b` is `(cout)` biases.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xt = self.value(x);
        let wt = self.value(w);
        let bt = self.value(b);
        let ws = wt.shape();
        assert_eq!(ws.len(), 4, "conv weight must be 4-D");
        let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, xt.c(), "conv2d channel mismatch");
        assert_eq!(bt.len(), cout, "conv2d bias size");
        let (h, wid) = (xt.h(), xt.w());
        let out = kernels::conv2d_fwd(
            xt.data(),
            cin,
            h,
            wid,
            wt.data(),
            cout,
            kh,
            kw,
            bt.data(),
            stride,
            pad,
        );
        let ho = kernels::conv_out_dim(h, kh, stride, pad);
        let wo = kernels::conv_out_dim(wid, kw, stride, pad);
        let v = Tensor::chw(cout, ho, wo, out).expect("conv shape");
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            self.needs(&[x, w, b]),
        )
    }

    /// Horizontal warp: `out(c, y, x) = src(c, y, x - disp(y, x))`, bilinear,
    /// zero where any footprint leaves the row.
    pub fn warp(&mut self, src: NodeId, disp: NodeId) -> NodeId {
        let st = self.value(src);
        let dt = self.value(disp);
        assert_eq!(dt.c(), 1, "disparity must be single channel");
        assert_eq!((st.h(), st.w()), (dt.h(), dt.w()), "warp spatial mismatch");
        let (c, h, w) = (st.c(), st.h(), st.w());
        let plan = Arc::new(kernels::warp_plan(dt.data(), h, w));
        let out = kernels::warp_apply(st.data(), c, h, w, &plan);
        let v = Tensor::chw(c, h, w, out).expect("warp shape");
        self.push(v, Op::Warp { src, disp, plan }, self.needs(&[src, disp]))
    }

    /// Validity mask of a warp by the current value of `disp`, as a constant.
    pub fn warp_validity(&mut self, disp: NodeId) -> NodeId {
        let dt = self.value(disp);
        let (h, w) = (dt.h(), dt.w());
        let plan = kernels::warp_plan(dt.data(), h, w);
        let v = Tensor::chw(1, h, w, plan.valid).expect("validity shape");
        self.input(v)
    }

    pub fn resize_bilinear(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let xt = self.value(x);
        let (c, h, w) = (xt.c(), xt.h(), xt.w());
        let out = kernels::resize_bilinear_fwd(xt.data(), c, h, w, oh, ow);
        let v = Tensor::chw(c, oh, ow, out).expect("resize shape");
        self.push(v, Op::Resize(x), self.needs(&[x]))
    }

    /// Local horizontal cross-correlation; output has `2*radius + 1` channels.
    pub fn corr1d(&mut self, a: NodeId, b: NodeId, radius: usize) -> NodeId {
        let at = self.value(a);
        let bt = self.value(b);
        assert_eq!(at.shape(), bt.shape(), "corr1d shape mismatch");
        let (c, h, w) = (at.c(), at.h(), at.w());
        let out = kernels::corr1d_fwd(at.data(), bt.data(), c, h, w, radius);
        let v = Tensor::chw(2 * radius + 1, h, w, out).expect("corr shape");
        self.push(v, Op::Corr1d { a, b, radius }, self.needs(&[a, b]))
    }

    /// Stereo matching cost volume with `hypotheses` integer shifts.
    pub fn cost_volume(&mut self, a: NodeId, b: NodeId, hypotheses: usize) -> NodeId {
        let at = self.value(a);
        let bt = self.value(b);
        assert_eq!(at.shape(), bt.shape(), "cost_volume shape mismatch");
        let (c, h, w) = (at.c(), at.h(), at.w());
        let out = kernels::cost_volume_fwd(at.data(), bt.data(), c, h, w, hypotheses);
        let v = Tensor::chw(hypotheses, h, w, out).expect("cost volume shape");
        self.push(v, Op::CostVolume { a, b, hypotheses }, self.needs(&[a, b]))
    }

    /// Mean smooth-L1 loss: per pixel `0.5 e^2 / beta` for `|e| < beta`, else
    /// `|e| - 0.5 beta`. With `beta = 1` this is the plain smooth-L1.
    pub fn smooth_l1(
        &mut self,
        pred: NodeId,
        target: Tensor<T>,
        mask: Option<Tensor<T>>,
        beta: T,
    ) -> NodeId {
        let pt = self.value(pred);
        assert_eq!(pt.shape(), target.shape(), "smooth_l1 target shape");
        if let Some(m) = &mask {
            assert_eq!(m.len(), pt.len(), "smooth_l1 mask size");
        }
        let count = match &mask {
            Some(m) => m.data().iter().copied().sum::<T>(),
            None => lit::<T>(pt.len() as f64),
        };
        let mut total = T::zero();
        if count > T::zero() {
            for i in 0..pt.len() {
                let mval = mask.as_ref().map_or(T::one(), |m| m.data()[i]);
                if mval == T::zero() {
                    continue;
                }
                let e = pt.data()[i] - target.data()[i];
                let a = e.abs();
                let l = if a < beta {
                    lit::<T>(0.5) * e * e / beta
                } else {
                    a - lit::<T>(0.5) * beta
                };
                total = total + mval * l;
            }
            total = total / count;
        }
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
            },
            self.needs(&[pred]),
        )
    }

    /// Mean softmax cross-entropy over channels against a constant target
    /// distribution (one-hot for hard labels).
    pub fn cross_entropy_ch(&mut self, scores: NodeId, target: Tensor<T>) -> NodeId {
        let st = self.value(scores);
        assert_eq!(st.shape(), target.shape(), "cross_entropy target shape");
        let (c, h, w) = (st.c(), st.h(), st.w());
        let n = h * w;
        let data = st.data();
        let mut total = T::zero();
        for i in 0..n {
            let mut m = T::neg_infinity();
            for ci in 0..c {
                m = m.max(data[ci * n + i]);
            }
            // log-sum-exp with the max subtracted
            let mut sum = T::zero();
            for ci in 0..c {
                sum = sum + (data[ci * n + i] - m).exp();
            }
            let lse = m + sum.ln();
            for ci in 0..c {
                let t = target.data()[ci * n + i];
                if t != T::zero() {
                    total = total + t * (lse - data[ci * n + i]);
                }
            }
        }
        total = total / lit::<T>(n as f64);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { scores, target },
            self.needs(&[scores]),
        )
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let at = self.value(a);
        let bt = self.value(b);
        assert_eq!(at.shape(), bt.shape(), "elementwise shape mismatch");
        let data = at
            .data()
            .iter()
            .zip(bt.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(at.shape().to_vec(), data).expect("zip shape")
    }

    /// Reverse sweep from a scalar node. Returns per-node gradients; only
    /// leaves created with [`Graph::leaf`] and interior nodes on a path to
    /// them are populated.
    pub fn backward(&self, out: NodeId) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward root must be scalar"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![T::one()]);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match &grads[id] {
                Some(_) => std::mem::take(&mut grads[id]).unwrap(),
                None => continue,
            };
            let keep_leaf = matches!(self.nodes[id].op, Op::Leaf);
            self.backprop_node(id, &g, &mut grads);
            if keep_leaf {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, contrib: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
            }
            Op::AddScalar(x, s) => {
                self.accumulate(grads, *x, g.to_vec());
                let sum: T = g.iter().copied().sum();
                self.accumulate(grads, *s, vec![sum]);
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().map(|&gv| gv * sv).collect());
                let dot: T = g.iter().zip(xv).map(|(&gv, &x)| gv * x).sum();
                self.accumulate(grads, *s, vec![dot]);
            }
            Op::AddConst(x, _) => self.accumulate(grads, *x, g.to_vec()),
            Op::MulConst(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&gv| gv * *c).collect());
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.iter().map(|&gv| -gv).collect()),
            Op::Recip(x) => {
                let y = node.value.data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(y).map(|(&gv, &yv)| -gv * yv * yv).collect(),
                );
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { gv * *slope })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect(),
                );
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                        .collect(),
                );
            }
            Op::SqrtGuarded(x, floor) => {
                let y = node.value.data();
                let half = lit::<T>(0.5);
                self.accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * half / yv.max(*floor))
                        .collect(),
                );
            }
            Op::SoftmaxCh(x) => {
                let y = node.value.data();
                let (c, h, w) = (node.value.c(), node.value.h(), node.value.w());
                let n = h * w;
                let mut dx = vec![T::zero(); c * n];
                for i in 0..n {
                    let mut dot = T::zero();
                    for ci in 0..c {
                        dot = dot + g[ci * n + i] * y[ci * n + i];
                    }
                    for ci in 0..c {
                        dx[ci * n + i] = y[ci * n + i] * (g[ci * n + i] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelDot(x, weights) => {
                let xt = self.value(*x);
                let n = xt.h() * xt.w();
                let mut dx = vec![T::zero(); xt.c() * n];
                for (ci, &wt) in weights.iter().enumerate() {
                    for i in 0..n {
                        dx[ci * n + i] = wt * g[i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                let gv = g[0] / lit::<T>(n as f64);
                self.accumulate(grads, *x, vec![gv; n]);
            }
            Op::ConcatCh(parts) => {
                let h = node.value.h();
                let w = node.value.w();
                let n = h * w;
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).c();
                    let slice = g[off * n..(off + pc) * n].to_vec();
                    self.accumulate(grads, p, slice);
                    off += pc;
                }
            }
            Op::SliceCh { x, from, to } => {
                let xt = self.value(*x);
                let n = xt.h() * xt.w();
                let mut dx = vec![T::zero(); xt.c() * n];
                dx[from * n..to * n].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let ws = wt.shape();
                let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (h, wid) = (xt.h(), xt.w());
                let ho = node.value.h();
                let wo = node.value.w();
                if self.nodes[x.0].requires_grad {
                    let dx = kernels::conv2d_bwd_x(
                        g,
                        cin,
                        h,
                        wid,
                        wt.data(),
                        cout,
                        kh,
                        kw,
                        *stride,
                        *pad,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.nodes[w.0].requires_grad {
                    let dw = kernels::conv2d_bwd_w(
                        g,
                        xt.data(),
                        cin,
                        h,
                        wid,
                        cout,
                        kh,
                        kw,
                        *stride,
                        *pad,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.nodes[b.0].requires_grad {
                    let db = kernels::conv2d_bwd_b(g, cout, ho, wo);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Warp { src, disp, plan } => {
                let st = self.value(*src);
                let (c, h, w) = (st.c(), st.h(), st.w());
                let (dsrc, ddisp) = kernels::warp_bwd(g, st.data(), c, h, w, plan);
                self.accumulate(grads, *src, dsrc);
                self.accumulate(grads, *disp, ddisp);
            }
            Op::Resize(x) => {
                let xt = self.value(*x);
                let (c, h, w) = (xt.c(), xt.h(), xt.w());
                let dx = kernels::resize_bilinear_bwd(g, c, h, w, node.value.h(), node.value.w());
                self.accumulate(grads, *x, dx);
            }
            Op::Corr1d { a, b, radius } => {
                let at = self.value(*a);
                let (c, h, w) = (at.c(), at.h(), at.w());
                let (da, db) =
                    kernels::corr1d_bwd(g, at.data(), self.value(*b).data(), c, h, w, *radius);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::CostVolume { a, b, hypotheses } => {
                let at = self.value(*a);
                let (c, h, w) = (at.c(), at.h(), at.w());
                let (da, db) = kernels::cost_volume_bwd(
                    g,
                    at.data(),
                    self.value(*b).data(),
                    c,
                    h,
                    w,
                    *hypotheses,
                );
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
            } => {
                let pt = self.value(*pred);
                let count = match mask {
                    Some(m) => m.data().iter().copied().sum::<T>(),
                    None => lit::<T>(pt.len() as f64),
                };
                let mut dp = vec![T::zero(); pt.len()];
                if count > T::zero() {
                    let scale = g[0] / count;
                    for i in 0..pt.len() {
                        let mval = mask.as_ref().map_or(T::one(), |m| m.data()[i]);
                        if mval == T::zero() {
                            continue;
                        }
                        let e = pt.data()[i] - target.data()[i];
                        let d = if e.abs() < *beta {
                            e / *beta
                        } else if e > T::zero() {
                            T::one()
                        } else {
                            -T::one()
                        };
                        dp[i] = scale * mval * d;
                    }
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::CrossEntropy { scores, target } => {
                let st = self.value(*scores);
                let (c, h, w) = (st.c(), st.h(), st.w());
                let n = h * w;
                let data = st.data();
                let mut dp = vec![T::zero(); c * n];
                let scale = g[0] / lit::<T>(n as f64);
                for i in 0..n {
                    let mut m = T::neg_infinity();
                    for ci in 0..c {
                        m = m.max(data[ci * n + i]);
                    }
                    let mut sum = T::zero();
                    for ci in 0..c {
                        sum = sum + (data[ci * n + i] - m).exp();
                    }
                    for ci in 0..c {
                        let p = (data[ci * n + i] - m).exp() / sum;
                        dp[ci * n + i] = scale * (p - target.data()[ci * n + i]);
                    }
                }
                self.accumulate(grads, *scores, dp);
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor1;

    /// Central finite difference of `f` w.r.t. one leaf of a rebuilt graph.
    fn fd_grad(
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
        x0: &Tensor<f64>,
        step: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(x0.len());
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut data = x0.data().to_vec();
                data[i] += delta;
                let mut g = Graph::new();
                let leaf = g.leaf(Tensor::new(x0.shape().to_vec(), data).unwrap());
                let root = build(&mut g, leaf);
                g.value(root).item()
            };
            out.push((eval(step) - eval(-step)) / (2.0 * step));
        }
        out
    }

    fn check(build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId + Clone, x0: Tensor<f64>) {
        let mut g = Graph::new();
        let leaf = g.leaf(x0.clone());
        let root = build.clone()(&mut g, leaf);
        let grads = g.backward(root).unwrap();
        let analytic = grads.get(leaf).unwrap();
        let numeric = fd_grad(build, &x0, 1e-4);
        let scale = numeric
            .iter()
            .chain(analytic.iter())
            .fold(1e-8f64, |m, &v| m.max(v.abs()));
        for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            assert!(
                (a - n).abs() <= 1e-6 * scale.max(1.0),
                "element {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let x = tensor1(&[0.3f64, -1.2, 2.0, 0.01]);
        check(
            |g, leaf| {
                let s = g.sigmoid(leaf);
                let t = g.tanh(s);
                let m = g.mul(t, t);
                g.mean_all(m)
            },
            x,
        );
    }

    #[test]
    fn softmax_grad_matches_fd() {
        let x = Tensor::chw(3, 1, 2, vec![0.5, -0.5, 1.5, 0.2, -1.0, 0.7]).unwrap();
        check(
            |g, leaf| {
                let s = g.softmax_ch(leaf);
                let w = g.channel_dot(s, vec![0.0, 1.0, 2.0]);
                g.mean_all(w)
            },
            x,
        );
    }

    #[test]
    fn conv_grads_match_fd() {
        let x = Tensor::chw(2, 4, 5, (0..40).map(|i| (i as f64) * 0.1 - 2.0).collect()).unwrap();
        // check gradient w.r.t. input
        check(
            |g, leaf| {
                let w = g.input(
                    Tensor::new(
                        vec![3, 2, 3, 3],
                        (0..54).map(|i| ((i * 7 % 5) as f64) * 0.2 - 0.4).collect(),
                    )
                    .unwrap(),
                );
                let b = g.input(Tensor::new(vec![3], vec![0.1, -0.2, 0.0]).unwrap());
                let y = g.conv2d(leaf, w, b, 1, 1);
                let y = g.relu(y);
                g.mean_all(y)
            },
            x.clone(),
        );
        // and w.r.t. weights
        let w0 = Tensor::new(
            vec![2, 2, 3, 3],
            (0..36).map(|i| ((i * 11 % 7) as f64) * 0.1 - 0.3).collect(),
        )
        .unwrap();
        check(
            |g, leaf| {
                let x = g.input(
                    Tensor::chw(2, 4, 5, (0..40).map(|i| (i as f64) * 0.1 - 2.0).collect())
                        .unwrap(),
                );
                let b = g.input(Tensor::new(vec![2], vec![0.0, 0.5]).unwrap());
                let y = g.conv2d(x, leaf, b, 2, 1);
                g.mean_all(y)
            },
            w0,
        );
    }

    #[test]
    fn warp_grad_wrt_disparity_matches_fd() {
        // non-integer disparities keep us away from interpolation kinks
        let d = Tensor::chw(1, 2, 5, vec![0.3, 0.7, 1.4, 0.2, 1.9, 0.6, 1.1, 0.4, 2.3, 0.8])
            .unwrap();
        check(
            |g, leaf| {
                let src = g.input(
                    Tensor::chw(2, 2, 5, (0..20).map(|i| ((i * 13 % 9) as f64) * 0.5).collect())
                        .unwrap(),
                );
                let wp = g.warp(src, leaf);
                let sq = g.mul(wp, wp);
                g.mean_all(sq)
            },
            d,
        );
    }

    #[test]
    fn losses_match_fd() {
        let x = tensor1(&[0.5f64, -2.0, 0.9, 3.0]);
        let target = tensor1(&[0.0f64, 0.0, 0.0, 0.0]);
        check(
            move |g, leaf| g.smooth_l1(leaf, target.clone(), None, 1.0),
            x,
        );
        let scores = Tensor::chw(2, 1, 3, vec![0.3, -0.7, 1.2, -0.3, 0.7, -1.2]).unwrap();
        let labels = Tensor::chw(2, 1, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        check(
            move |g, leaf| g.cross_entropy_ch(leaf, labels.clone()),
            scores,
        );
    }

    #[test]
    fn resize_and_corr_grads_match_fd() {
        let x = Tensor::chw(2, 3, 4, (0..24).map(|i| (i as f64) * 0.3 - 3.0).collect()).unwrap();
        check(
            |g, leaf| {
                let r = g.resize_bilinear(leaf, 5, 7);
                let sq = g.mul(r, r);
                g.mean_all(sq)
            },
            x.clone(),
        );
        check(
            |g, leaf| {
                let other = g.input(
                    Tensor::chw(2, 3, 4, (0..24).map(|i| ((i * 5 % 7) as f64) * 0.25).collect())
                        .unwrap(),
                );
                let c = g.corr1d(leaf, other, 2);
                g.mean_all(c)
            },
            x.clone(),
        );
        check(
            |g, leaf| {
                let other = g.input(
                    Tensor::chw(2, 3, 4, (0..24).map(|i| ((i * 5 % 7) as f64) * 0.25).collect())
                        .unwrap(),
                );
                let cv = g.cost_volume(other, leaf, 3);
                let sq = g.mul(cv, cv);
                g.mean_all(sq)
            },
            x,
        );
    }

    #[test]
    fn scalar_broadcast_grads_match_fd() {
        let x = tensor1(&[1.0f64, 2.0, 3.0, 4.0]);
        check(
            |g, leaf| {
                // normalize by mean/std, then reduce
                let m = g.mean_all(leaf);
                let nm = g.neg(m);
                let centered = g.add_scalar(leaf, nm);
                let sq = g.mul(centered, centered);
                let var = g.mean_all(sq);
                let s = g.sqrt_guarded(var, 1e-9);
                let denom = g.add_const(s, 1e-6);
                let inv = g.recip(denom);
                let norm = g.mul_scalar(centered, inv);
                let cube = g.mul(norm, norm);
                let out = g.mul(cube, norm);
                g.mean_all(out)
            },
            x,
        );
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(tensor1(&[1.0f32, 2.0]));
        assert!(g.backward(x).is_err());
    }
}
