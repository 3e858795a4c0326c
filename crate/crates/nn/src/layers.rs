//! Layers built on the tape: linear, conv, batch/layer norm, LSTM, attention.

use crate::graph::{Graph, NodeId};
use crate::params::{ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation, weight stored as `[in, out]`.
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.uniform("weight", &[in_dim, out_dim], bound);
        let bias = bias.then(|| pb.uniform("bias", &[out_dim], bound));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [.., in] -> [.., out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(pb: &mut ParamBuilder<'_>, count: usize, dim: usize) -> Self {
        let table = pb.normal("table", &[count, dim], 1.0 / (dim as f64).sqrt());
        Self { table, dim }
    }

    /// `ids -> [ids.len(), dim]`.
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize]) -> NodeId {
        let t = g.param(self.table);
        g.gather(t, ids)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Self {
        Self {
            gamma: pb.constant("gamma", &[channels], 1.0),
            beta: pb.constant("beta", &[channels], 0.0),
            running_mean: pb.buffer("running_mean", &[channels], 0.0),
            running_var: pb.buffer("running_var", &[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean,
            self.running_var,
            self.momentum,
            self.eps,
        )
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        Self {
            gamma: pb.constant("gamma", &[dim], 1.0),
            beta: pb.constant("beta", &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// conv(3x3, pad 1) -> batch-norm -> ReLU -> 2x2 max-pool.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, in_ch: usize, out_ch: usize) -> Self {
        let fan_in = (in_ch * 9) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = pb.uniform("weight", &[out_ch, in_ch, 3, 3], bound * 3f64.sqrt());
        let bias = pb.uniform("bias", &[out_ch], bound);
        let bn = BatchNorm::new(&mut pb.pp("bn"), out_ch);
        Self { weight, bias, bn }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.conv2d(x, w, Some(b), 1);
        let y = self.bn.forward(g, y);
        let y = g.relu(y);
        g.max_pool2(y)
    }
}

/// Single LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: pb.uniform("w_ih", &[input, 4 * hidden], bound),
            w_hh: pb.uniform("w_hh", &[hidden, 4 * hidden], bound),
            bias: pb.uniform("bias", &[4 * hidden], bound),
            input,
            hidden,
        }
    }

    /// Input projection for a whole sequence `[B, T, in] -> [B, T, 4H]` (bias included).
    pub fn project_inputs(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.w_ih);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add(y, b)
    }

    /// One step given the already projected input `xp: [B, 4H]`.
    pub fn step_projected(
        &self,
        g: &mut Graph<'_>,
        xp: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let whh = g.param(self.w_hh);
        let hp = g.matmul(h, whh);
        let z = g.add(xp, hp);
        let hd = self.hidden;
        let i = g.narrow(z, 1, 0, hd);
        let f = g.narrow(z, 1, hd, hd);
        let gg = g.narrow(z, 1, 2 * hd, hd);
        let o = g.narrow(z, 1, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let gg = g.tanh(gg);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ig = g.mul(i, gg);
        let c2 = g.add(fc, ig);
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc);
        (h2, c2)
    }

    /// One step for input `x: [B, in]`.
    pub fn step(&self, g: &mut Graph<'_>, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
        let xp = self.project_inputs(g, x);
        self.step_projected(g, xp, h, c)
    }
}

/// Stacked bidirectional LSTM. Each direction has `hidden` units.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub hidden: usize,
}

/// Outputs of [`BiLstm::forward`].
pub struct BiLstmOutput {
    /// `[B, T, 2H]` top-layer outputs.
    pub outputs: NodeId,
    /// `[B, 2H]` final forward state concatenated with final backward state.
    pub h: NodeId,
    pub c: NodeId,
}

impl BiLstm {
    pub fn new(pb: &mut ParamBuilder<'_>, input: usize, hidden: usize, layers: usize) -> Self {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let inp = if l == 0 { input } else { 2 * hidden };
            let mut lp = pb.pp(&format!("layer{l}"));
            let fwd = LstmCell::new(&mut lp.pp("fwd"), inp, hidden);
            let bwd = LstmCell::new(&mut lp.pp("bwd"), inp, hidden);
            out.push((fwd, bwd));
        }
        Self {
            layers: out,
            hidden,
        }
    }

    /// `x: [B, T, in]`, zero initial state.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> BiLstmOutput {
        let b = g.shape(x)[0];
        let t = g.shape(x)[1];
        let hd = self.hidden;
        let mut input = x;
        let mut last = None;
        for (fwd, bwd) in &self.layers {
            let run = |g: &mut Graph<'_>, cell: &LstmCell, order: Vec<usize>| {
                let xp = cell.project_inputs(g, input);
                let mut h = g.constant(crate::Tensor::zeros(vec![b, hd]));
                let mut c = g.constant(crate::Tensor::zeros(vec![b, hd]));
                let mut outs = vec![h; t];
                for step in order {
                    let xs = g.narrow(xp, 1, step, 1);
                    let xs = g.reshape(xs, &[b, 4 * hd]);
                    let (h2, c2) = cell.step_projected(g, xs, h, c);
                    h = h2;
                    c = c2;
                    outs[step] = g.reshape(h, &[b, 1, hd]);
                }
                (outs, h, c)
            };
            let (fo, fh, fc) = run(g, fwd, (0..t).collect());
            let (bo, bh, bc) = run(g, bwd, (0..t).rev().collect());
            let f_seq = g.concat(&fo, 1);
            let b_seq = g.concat(&bo, 1);
            input = g.concat(&[f_seq, b_seq], 2);
            let h = g.concat(&[fh, bh], 1);
            let c = g.concat(&[fc, bc], 1);
            last = Some((h, c));
        }
        let (h, c) = last.expect("BiLstm needs at least one layer");
        BiLstmOutput {
            outputs: input,
            h,
            c,
        }
    }
}

/// Multi-head scaled dot-product self-attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim, true),
            k: Linear::new(&mut pb.pp("k"), dim, dim, true),
            v: Linear::new(&mut pb.pp("v"), dim, dim, true),
            o: Linear::new(&mut pb.pp("o"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// `x: [B, T, D] -> [B, T, D]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let (b, t) = (g.shape(x)[0], g.shape(x)[1]);
        let dh = self.dim / self.heads;
        let split = |g: &mut Graph<'_>, y: NodeId| {
            let y = g.reshape(y, &[b, t, self.heads, dh]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            g.reshape(y, &[b * self.heads, t, dh])
        };
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let q = split(g, q);
        let k = split(g, k);
        let v = split(g, v);
        let s = g.matmul_t(q, k, true);
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.softmax(s);
        let y = g.matmul(a, v);
        let y = g.reshape(y, &[b, self.heads, t, dh]);
        let y = g.permute(y, &[0, 2, 1, 3]);
        let y = g.reshape(y, &[b, t, self.dim]);
        self.o.forward(g, y)
    }
}

/// Post-norm transformer encoder block: self-attention and a ReLU feed-forward,
/// each wrapped in a residual connection followed by layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize, ff: usize) -> Self {
        Self {
            attn: MultiHeadSelfAttention::new(&mut pb.pp("attn"), dim, heads),
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim),
            ff1: Linear::new(&mut pb.pp("ff1"), dim, ff, true),
            ff2: Linear::new(&mut pb.pp("ff2"), ff, dim, true),
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let a = self.attn.forward(g, x);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ff1.forward(g, x);
        let f = g.relu(f);
        let f = self.ff2.forward(g, f);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}
