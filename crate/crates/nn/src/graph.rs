//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are bound
//! lazily from a [`ParamStore`]; after [`Graph::backward`] their gradients
//! are read back with [`Graph::param_grads`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, numel, split_at_axis};
use crate::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64),
    MatMul {
        a: NodeId,
        b: NodeId,
        tb: bool,
    },
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    Concat(Vec<NodeId>, usize),
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SumAll(NodeId),
    SumAxis(NodeId, usize),
    MaxAxis {
        x: NodeId,
        arg: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        arg: Vec<usize>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
}

/// Batch-norm running statistics recorded during a training-mode pass.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub id: ParamId,
    pub value: Tensor,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, NodeId>,
    training: bool,
    track_params: bool,
    buffer_updates: Vec<BufferUpdate>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Graph<'p> {
    /// Training graph: parameters require gradients and batch-norm uses batch statistics.
    pub fn train(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            bound: HashMap::new(),
            training: true,
            track_params: true,
            buffer_updates: Vec::new(),
        }
    }

    /// Inference graph: no gradients, batch-norm uses running statistics.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            bound: HashMap::new(),
            training: false,
            track_params: false,
            buffer_updates: Vec::new(),
        }
    }

    /// Graph without a parameter store (loss tests, oracles).
    pub fn detached() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
            training: false,
            track_params: false,
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n.0].value
    }

    pub fn shape(&self, n: NodeId) -> &[usize] {
        self.nodes[n.0].value.shape()
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn ng(&self, n: NodeId) -> bool {
        self.nodes[n.0].needs_grad
    }

    /// Input without gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that collects a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter (once per graph).
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let store = self.params.expect("graph has no parameter store");
        let needs = self.track_params && store.is_trainable(id);
        let n = self.push_arc(Arc::clone(store.get(id)), Op::Leaf, needs);
        self.bound.insert(id, n);
        n
    }

    /// Gradients of bound trainable parameters.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&pid, &n)| grads.get(n).map(|g| (pid, g.clone())))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x).map(|t| scale * t + shift);
        let ng = self.ng(x);
        self.push(v, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        // NaN passes through
        self.unary(x, |v| if v < 0.0 { 0.0 } else { v }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = (*self.nodes[x.0].value).clone().reshape(shape.to_vec());
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let v = self.value(x).permute(perm);
        let ng = self.ng(x);
        self.push(v, Op::Permute(x, perm.to_vec()), ng)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::Concat(parts.to_vec(), axis), ng)
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self.value(x).narrow(axis, start, len);
        let ng = self.ng(x);
        self.push(v, Op::Narrow { x, axis, start }, ng)
    }

    /// Rows of `table` (first axis) selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let w = t.numel() / t.dim(0);
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = ids.len();
        let ng = self.ng(table);
        self.push(
            Tensor::new(shape, data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let t = self.value(x);
        let (outer, inner) = split_at_axis(t.shape(), axis);
        let d = t.dim(axis);
        let mut out = vec![0.0; outer * inner];
        let src = t.data();
        for o in 0..outer {
            for k in 0..d {
                let base = (o * d + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::SumAxis(x, axis), ng)
    }

    /// Max over `axis`, removing it. Ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let t = self.value(x);
        let (outer, inner) = split_at_axis(t.shape(), axis);
        let d = t.dim(axis);
        let src = t.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                let base = (o * d + k) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    if v > out[o * inner + i] || v.is_nan() || k == 0 {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = base + i;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::MaxAxis { x, arg }, ng)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = softmax_last(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let w = *t.shape().last().expect("log_softmax on scalar");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out);
        let ng = self.ng(x);
        self.push(v, Op::LogSoftmax(x), ng)
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a @ b` (or `a @ bᵀ` when `tb`). `a` is `[.., m, k]`; `b` is either a shared
    /// 2-D matrix or carries the same leading batch dims as `a`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, tb: bool) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.rank() >= 2 && bv.rank() >= 2, "matmul needs rank >= 2");
        let ar = av.rank();
        let m = av.dim(ar - 2);
        let k = av.dim(ar - 1);
        let br = bv.rank();
        let (bk, n) = if tb {
            (bv.dim(br - 1), bv.dim(br - 2))
        } else {
            (bv.dim(br - 2), bv.dim(br - 1))
        };
        assert_eq!(k, bk, "matmul inner dim mismatch {:?} x {:?}", av.shape(), bv.shape());
        let batch: usize = av.shape()[..ar - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        if br == 2 {
            gemm(batch * m, k, n, av.data(), false, bv.data(), tb, &mut out, 0.0);
        } else {
            assert_eq!(&av.shape()[..ar - 2], &bv.shape()[..br - 2], "matmul batch dims");
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut shape = av.shape()[..ar - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, out), Op::MatMul { a, b, tb }, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false)
    }

    /// Stride-1 2-D convolution, `x: [B, Ci, H, W]`, `w: [Co, Ci, K, K]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, pad: usize) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let geo = ConvGeom::new(xv.shape(), wv.shape(), pad);
        let mut out = vec![0.0; geo.batch * geo.co * geo.ho * geo.wo];
        let mut col = vec![0.0; geo.col_rows() * geo.col_cols()];
        let per_in = geo.ci * geo.h * geo.w;
        let per_out = geo.co * geo.ho * geo.wo;
        for bi in 0..geo.batch {
            geo.im2col(&xv.data()[bi * per_in..(bi + 1) * per_in], &mut col);
            gemm(
                geo.co,
                geo.col_rows(),
                geo.col_cols(),
                wv.data(),
                false,
                &col,
                false,
                &mut out[bi * per_out..(bi + 1) * per_out],
                0.0,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            let hw = geo.ho * geo.wo;
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let c = i % geo.co;
                for v in chunk {
                    *v += bv[c];
                }
            }
        }
        let shape = vec![geo.batch, geo.co, geo.ho, geo.wo];
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(shape, out), Op::Conv2d { x, w, b, pad }, ng)
    }

    /// 2x2 max pooling with stride 2 over the last two axes (floor on odd sizes).
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let r = xv.rank();
        assert!(r >= 2);
        let (h, w) = (xv.dim(r - 2), xv.dim(r - 1));
        let (ho, wo) = (h / 2, w / 2);
        let planes = xv.numel() / (h * w);
        let src = xv.data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut arg = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] || src[idx].is_nan() {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    arg.push(best);
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, out), Op::MaxPool2 { x, arg }, ng)
    }

    /// Batch normalisation over every axis except 1 (channels).
    ///
    /// In a training graph batch statistics are used and running statistics are
    /// queued as [`BufferUpdate`]s; otherwise the running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> NodeId {
        let xv = self.value(x);
        let c = xv.dim(1);
        let (outer, inner) = (xv.dim(0), xv.numel() / (xv.dim(0) * c));
        let m = (outer * inner) as f64;
        let src = xv.data();
        let (mean, var) = if self.training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for o in 0..outer {
                for (ch, mu) in mean.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *mu += src[base..base + inner].iter().sum::<f64>();
                }
            }
            for mu in &mut mean {
                *mu /= m;
            }
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    var[ch] += src[base..base + inner]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m;
            }
            let store = self.params.expect("batch norm needs a parameter store");
            let rm = store.get(running_mean);
            let rv = store.get(running_var);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let new_mean = Tensor::new(
                vec![c],
                (0..c)
                    .map(|i| (1.0 - momentum) * rm.data()[i] + momentum * mean[i])
                    .collect(),
            );
            let new_var = Tensor::new(
                vec![c],
                (0..c)
                    .map(|i| (1.0 - momentum) * rv.data()[i] + momentum * var[i] * unbias)
                    .collect(),
            );
            self.buffer_updates.push(BufferUpdate {
                id: running_mean,
                value: new_mean,
            });
            self.buffer_updates.push(BufferUpdate {
                id: running_var,
                value: new_var,
            });
            (mean, var)
        } else {
            let store = self.params.expect("batch norm needs a parameter store");
            (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = self.training;
        self.push(
            Tensor::new(shape.clone(), out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat),
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("layer_norm on scalar");
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        let mut inv_std = Vec::with_capacity(xv.numel() / d);
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(shape.clone(), out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat),
                inv_std,
            },
            ng,
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(NodeId(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], n: NodeId, g: Tensor) {
        if !self.nodes[n.0].needs_grad {
            return;
        }
        match &mut grads[n.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id.0];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let gb = reduce_to_suffix(g, self.shape(*b));
                    self.acc(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    let ga = broadcast_binary(g, bv, |x, y| x * y);
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let prod = g.zip_map(av, |x, y| x * y);
                    self.acc(grads, *b, reduce_to_suffix(&prod, bv.shape()));
                }
            }
            Op::Affine(x, s) => self.acc(grads, *x, g.scale(*s)),
            Op::MatMul { a, b, tb } => self.matmul_backward(*a, *b, *tb, g, grads),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *x, g.permute(&inv));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshape(shape));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let d = self.shape(p)[*axis];
                    if self.ng(p) {
                        self.acc(grads, p, g.narrow(*axis, start, d));
                    }
                    start += d;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, inner) = split_at_axis(xs, *axis);
                let d = xs[*axis];
                let len = g.dim(*axis);
                let mut gx = vec![0.0; numel(xs)];
                for o in 0..outer {
                    let dst = o * d * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, *x, Tensor::new(xs.to_vec(), gx));
            }
            Op::Sigmoid(x) => self.acc(grads, *x, g.zip_map(out, |g, y| g * y * (1.0 - y))),
            Op::Tanh(x) => self.acc(grads, *x, g.zip_map(out, |g, y| g * (1.0 - y * y))),
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.acc(grads, *x, gx);
            }
            Op::Exp(x) => self.acc(grads, *x, g.zip_map(out, |g, y| g * y)),
            Op::Ln(x) => self.acc(grads, *x, g.zip_map(self.value(*x), |g, v| g / v)),
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |g, v| g * v.signum() * f64::from(v != 0.0));
                self.acc(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = g.zip_map(self.value(*x), |g, v| {
                    if v >= *lo && v <= *hi {
                        g
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let w = *out.shape().last().unwrap();
                let mut gx = vec![0.0; out.numel()];
                for ((gr, yr), dst) in g
                    .data()
                    .chunks(w)
                    .zip(out.data().chunks(w))
                    .zip(gx.chunks_mut(w))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::LogSoftmax(x) => {
                let w = *out.shape().last().unwrap();
                let mut gx = vec![0.0; out.numel()];
                for ((gr, yr), dst) in g
                    .data()
                    .chunks(w)
                    .zip(out.data().chunks(w))
                    .zip(gx.chunks_mut(w))
                {
                    let s: f64 = gr.iter().sum();
                    for j in 0..w {
                        dst[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::SumAll(x) => {
                let s = g.to_scalar();
                self.acc(grads, *x, Tensor::full(self.shape(*x).to_vec(), s));
            }
            Op::SumAxis(x, axis) => {
                let xs = self.shape(*x);
                let (outer, inner) = split_at_axis(xs, *axis);
                let d = xs[*axis];
                let mut gx = vec![0.0; numel(xs)];
                for o in 0..outer {
                    for k in 0..d {
                        let base = (o * d + k) * inner;
                        gx[base..base + inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *x, Tensor::new(xs.to_vec(), gx));
            }
            Op::MaxAxis { x, arg, .. } => {
                let xs = self.shape(*x);
                let mut gx = vec![0.0; numel(xs)];
                for (gi, &src) in g.data().iter().zip(arg) {
                    gx[src] += gi;
                }
                self.acc(grads, *x, Tensor::new(xs.to_vec(), gx));
            }
            Op::MaxPool2 { x, arg } => {
                let xs = self.shape(*x);
                let mut gx = vec![0.0; numel(xs)];
                for (gi, &src) in g.data().iter().zip(arg) {
                    gx[src] += gi;
                }
                self.acc(grads, *x, Tensor::new(xs.to_vec(), gx));
            }
            Op::Conv2d { x, w, b, pad } => self.conv_backward(*x, *w, *b, *pad, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = xhat.dim(1);
                let outer = xhat.dim(0);
                let inner = xhat.numel() / (outer * c);
                let m = (outer * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += g.data()[i];
                            sum_gx[ch] += g.data()[i] * xhat.data()[i];
                        }
                    }
                }
                let gamma_v = self.value(*gamma).data();
                if self.ng(*x) {
                    let mut gx = vec![0.0; xhat.numel()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gamma_v[ch] * inv_std[ch];
                            for i in base..base + inner {
                                gx[i] = if *batch_stats {
                                    k / m * (m * g.data()[i] - sum_g[ch] - xhat.data()[i] * sum_gx[ch])
                                } else {
                                    k * g.data()[i]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(xhat.shape().to_vec(), gx));
                }
                self.acc(grads, *gamma, Tensor::new(vec![c], sum_gx));
                self.acc(grads, *beta, Tensor::new(vec![c], sum_g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *xhat.shape().last().unwrap();
                let gamma_v = self.value(*gamma).data();
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gx = vec![0.0; xhat.numel()];
                for (r, (gr, hr)) in g.data().chunks(d).zip(xhat.data().chunks(d)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let gg = gr[j] * gamma_v[j];
                        s1 += gg;
                        s2 += gg * hr[j];
                    }
                    let is = inv_std[r];
                    for j in 0..d {
                        let gg = gr[j] * gamma_v[j];
                        gx[r * d + j] = is / d as f64 * (d as f64 * gg - s1 - hr[j] * s2);
                    }
                }
                self.acc(grads, *x, Tensor::new(xhat.shape().to_vec(), gx));
                self.acc(grads, *gamma, Tensor::new(vec![d], ggamma));
                self.acc(grads, *beta, Tensor::new(vec![d], gbeta));
            }
            Op::Gather { table, ids } => {
                let ts = self.shape(*table);
                let w = numel(ts) / ts[0];
                let mut gt = vec![0.0; numel(ts)];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..w {
                        gt[i * w + j] += g.data()[r * w + j];
                    }
                }
                self.acc(grads, *table, Tensor::new(ts.to_vec(), gt));
            }
        }
    }

    fn matmul_backward(
        &self,
        a: NodeId,
        b: NodeId,
        tb: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let av = self.value(a);
        let bv = self.value(b);
        let ar = av.rank();
        let m = av.dim(ar - 2);
        let k = av.dim(ar - 1);
        let n = *g.shape().last().unwrap();
        let batch: usize = av.shape()[..ar - 2].iter().product();
        let shared = bv.rank() == 2;
        if self.ng(a) {
            let mut ga = vec![0.0; av.numel()];
            if shared {
                // g[B*m, n] @ (tb ? b[n,k] : b[k,n]ᵀ)
                gemm(batch * m, n, k, g.data(), false, bv.data(), !tb, &mut ga, 0.0);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g.data()[i * m * n..(i + 1) * m * n],
                        false,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        !tb,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        0.0,
                    );
                }
            }
            self.acc(grads, a, Tensor::new(av.shape().to_vec(), ga));
        }
        if self.ng(b) {
            let mut gb = vec![0.0; bv.numel()];
            let rows = if shared { batch * m } else { m };
            let reps = if shared { 1 } else { batch };
            for i in 0..reps {
                let a_blk = &av.data()[i * rows * k..(i + 1) * rows * k];
                let g_blk = &g.data()[i * rows * n..(i + 1) * rows * n];
                let gb_blk = &mut gb[i * k * n..(i + 1) * k * n];
                if tb {
                    // gb[n,k] = gᵀ a
                    gemm(n, rows, k, g_blk, true, a_blk, false, gb_blk, 0.0);
                } else {
                    // gb[k,n] = aᵀ g
                    gemm(k, rows, n, a_blk, true, g_blk, false, gb_blk, 0.0);
                }
            }
            self.acc(grads, b, Tensor::new(bv.shape().to_vec(), gb));
        }
    }

    fn conv_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let geo = ConvGeom::new(xv.shape(), wv.shape(), pad);
        let per_in = geo.ci * geo.h * geo.w;
        let per_out = geo.co * geo.ho * geo.wo;
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut col = vec![0.0; geo.col_rows() * geo.col_cols()];
        let mut gcol = vec![0.0; geo.col_rows() * geo.col_cols()];
        let mut gw = vec![0.0; wv.numel()];
        let mut gx = if need_x { vec![0.0; xv.numel()] } else { Vec::new() };
        for bi in 0..geo.batch {
            let g_blk = &g.data()[bi * per_out..(bi + 1) * per_out];
            if need_w {
                geo.im2col(&xv.data()[bi * per_in..(bi + 1) * per_in], &mut col);
                gemm(
                    geo.co,
                    geo.col_cols(),
                    geo.col_rows(),
                    g_blk,
                    false,
                    &col,
                    true,
                    &mut gw,
                    1.0,
                );
            }
            if need_x {
                gemm(
                    geo.col_rows(),
                    geo.co,
                    geo.col_cols(),
                    wv.data(),
                    true,
                    g_blk,
                    false,
                    &mut gcol,
                    0.0,
                );
                geo.col2im(&gcol, &mut gx[bi * per_in..(bi + 1) * per_in]);
            }
        }
        if need_x {
            self.acc(grads, x, Tensor::new(xv.shape().to_vec(), gx));
        }
        if need_w {
            self.acc(grads, w, Tensor::new(wv.shape().to_vec(), gw));
        }
        if let Some(b) = b {
            if self.ng(b) {
                let hw = geo.ho * geo.wo;
                let mut gb = vec![0.0; geo.co];
                for (i, chunk) in g.data().chunks(hw).enumerate() {
                    gb[i % geo.co] += chunk.iter().sum::<f64>();
                }
                self.acc(grads, b, Tensor::new(vec![geo.co], gb));
            }
        }
    }
}

struct ConvGeom {
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], pad: usize) -> Self {
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [Co, Ci, K, K]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let k = ws[2];
        let ho = xs[2] + 2 * pad + 1 - k;
        let wo = xs[3] + 2 * pad + 1 - k;
        Self {
            batch: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            k,
            pad,
            ho,
            wo,
        }
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output-x range `[lo, hi)` for kernel column `kx`.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (xlo, xhi) = self.x_range(kx);
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = oy + ky;
                        if iy < self.pad || iy >= self.h + self.pad {
                            line.fill(0.0);
                            continue;
                        }
                        let iy = iy - self.pad;
                        line[..xlo].fill(0.0);
                        line[xhi..].fill(0.0);
                        let src = c * self.h * self.w + iy * self.w;
                        // ix = ox + kx - pad
                        let s0 = src + xlo + kx - self.pad;
                        line[xlo..xhi].copy_from_slice(&x[s0..s0 + (xhi - xlo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let cols = self.col_cols();
        for c in 0..self.ci {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    let (xlo, xhi) = self.x_range(kx);
                    for oy in 0..self.ho {
                        let iy = oy + ky;
                        if iy < self.pad || iy >= self.h + self.pad {
                            continue;
                        }
                        let iy = iy - self.pad;
                        let dst0 = c * self.h * self.w + iy * self.w + xlo + kx - self.pad;
                        let line = &src[oy * self.wo + xlo..oy * self.wo + xhi];
                        for (d, s) in x[dst0..dst0 + (xhi - xlo)].iter_mut().zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_last(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("softmax on scalar");
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(w) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Elementwise op where `b` has the same shape as `a` or equals a suffix of it.
fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let ar = a.rank();
    let br = b.rank();
    assert!(
        br <= ar && a.shape()[ar - br..] == *b.shape(),
        "cannot broadcast {:?} against {:?}",
        b.shape(),
        a.shape()
    );
    let bn = b.numel();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % bn]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn reduce_to_suffix(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let n = numel(shape);
    let mut out = vec![0.0; n];
    for (i, v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(shape.to_vec(), out)
}
