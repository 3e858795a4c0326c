//! The captioning network: audio embedding, keyword heads, BLSTM encoder,
//! sentence-length head and attention LSTM decoder.

use audiocap_core::audio::FeatureTensor;
use audiocap_core::{Error, Result};
use audiocap_nn::layers::{BiLstm, ConvBlock, Embedding, Linear, LstmCell, MultiHeadSelfAttention, TransformerBlock};
use audiocap_nn::{Graph, NodeId, ParamBuilder, ParamStore, Tensor};
use rand::RngCore;

use crate::config::{ModelConfig, Variant};

#[derive(Clone, Debug)]
enum AudioEmbed {
    Cnn {
        blocks: Vec<ConvBlock>,
        fc1: Linear,
        fc2: Linear,
    },
    Transformer {
        block: ConvBlock,
        fc: Linear,
        encoder: TransformerBlock,
    },
}

/// Keyword estimation trunk: MHSA (or FC for Model2) then FC to C_key, time-max, sigmoid.
#[derive(Clone, Debug)]
struct KeywordHead {
    attn: Option<MultiHeadSelfAttention>,
    fc_in: Option<Linear>,
    out: Linear,
}

impl KeywordHead {
    fn new(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let (attn, fc_in) = if cfg.variant == Variant::Model2 {
            (None, Some(Linear::new(&mut pb.pp("fc_in"), cfg.d, cfg.d, true)))
        } else {
            (Some(MultiHeadSelfAttention::new(&mut pb.pp("mhsa"), cfg.d, cfg.mhsa_heads)), None)
        };
        Self {
            attn,
            fc_in,
            out: Linear::new(&mut pb.pp("out"), cfg.d, cfg.c_key, true),
        }
    }

    /// `a: [B, T_a, D] -> [B, C_key]` probabilities.
    fn forward(&self, g: &mut Graph<'_>, a: NodeId) -> NodeId {
        let y = match (&self.attn, &self.fc_in) {
            (Some(attn), _) => attn.forward(g, a),
            (None, Some(fc)) => fc.forward(g, a),
            _ => unreachable!(),
        };
        let y = self.out.forward(g, y);
        let y = g.max_axis(y, 1);
        g.sigmoid(y)
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    width: usize,
}

/// Everything the encoder side produces for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, T_a, D]`.
    pub a: NodeId,
    /// `[B, C_key]`.
    pub p_cap: NodeId,
    pub p_meta: Option<NodeId>,
    /// Top-K_m meta keyword indices per item, descending probability.
    pub meta_ids: Vec<Vec<usize>>,
    /// `[B, K_m, D]`.
    pub m: Option<NodeId>,
    /// Length of the BLSTM input sequence.
    pub encoder_steps: usize,
    /// `[B, D]` each.
    pub h: NodeId,
    pub c: NodeId,
    /// `[B, L_max]`.
    pub len_logits: NodeId,
    pub p_len: NodeId,
    /// `[B, D_l]`.
    pub l: NodeId,
    /// Decoder initial state `[B, D + D_l]`.
    pub h0: NodeId,
    pub c0: NodeId,
}

/// Teacher-forced decoder inputs: one or two id sequences per item (two under text mix-up).
#[derive(Clone, Debug)]
pub struct DecoderInput<'a> {
    /// `B` sequences of `N` ids beginning with BOS.
    pub ids: &'a [Vec<u32>],
    /// Partner sequences and mixing weight β.
    pub mix: Option<(&'a [Vec<u32>], f64)>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub enc: Encoded,
    /// `[B, N, C_cap]` log-posteriors.
    pub log_probs: NodeId,
}

#[derive(Clone, Debug)]
pub struct CaptionNet {
    pub cfg: ModelConfig,
    audio: AudioEmbed,
    cap_head: KeywordHead,
    meta_head: Option<KeywordHead>,
    meta_embed: Option<Embedding>,
    encoder: BiLstm,
    len_fc1: Linear,
    len_fc2: Linear,
    word_embed: Embedding,
    decoder: LstmCell,
    attention: Option<Attention>,
    out: Linear,
}

/// `[B, 3, F, T]` input tensor from feature tensors of equal shape.
pub fn batch_tensor(items: &[&FeatureTensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let [c, f, t] = first.shape();
    let mut data = Vec::with_capacity(items.len() * c * f * t);
    for x in items {
        if x.shape() != first.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), first.shape())));
        }
        data.extend(x.data.iter().map(|&v| f64::from(v)));
    }
    Ok(Tensor::new(vec![items.len(), c, f, t], data))
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn top_k(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

/// Keep frames 0, 2, 4, ... of `x: [B, T, D]`.
fn keep_even(g: &mut Graph<'_>, x: NodeId) -> NodeId {
    let t = g.shape(x)[1];
    let ids: Vec<usize> = (0..t).step_by(2).collect();
    let y = g.permute(x, &[1, 0, 2]);
    let y = g.gather(y, &ids);
    g.permute(y, &[1, 0, 2])
}

impl CaptionNet {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let mut root = ParamBuilder::new(store, rng);
        let d = cfg.d;
        let ch = cfg.cnn_channels;
        let audio = if cfg.variant == Variant::Model5 {
            let mut pb = root.pp("audio");
            AudioEmbed::Transformer {
                block: ConvBlock::new(&mut pb.pp("cnn0"), 3, ch),
                fc: Linear::new(&mut pb.pp("fc"), ch * cfg.freq_after_cnn(), d, true),
                encoder: TransformerBlock::new(&mut pb.pp("transformer"), d, cfg.mhsa_heads, 2 * d),
            }
        } else {
            let mut pb = root.pp("audio");
            let blocks = (0..3)
                .map(|i| ConvBlock::new(&mut pb.pp(&format!("cnn{i}")), if i == 0 { 3 } else { ch }, ch))
                .collect();
            AudioEmbed::Cnn {
                blocks,
                fc1: Linear::new(&mut pb.pp("fc1"), ch * cfg.freq_after_cnn(), d, true),
                fc2: Linear::new(&mut pb.pp("fc2"), d, d, true),
            }
        };
        let cap_head = KeywordHead::new(&mut root.pp("caption_keywords"), cfg);
        let (meta_head, meta_embed) = if cfg.variant.uses_meta() {
            let mut pb = root.pp("meta_keywords");
            let head = KeywordHead::new(&mut pb.pp("head"), cfg);
            let embed = Embedding::new(&mut pb.pp("embed"), cfg.c_key, d);
            (Some(head), Some(embed))
        } else {
            (None, None)
        };
        let encoder = BiLstm::new(&mut root.pp("encoder"), d, d / 2, cfg.blstm_layers);
        let len_fc1 = Linear::new(&mut root.pp("length.fc1"), 2 * d, cfg.l_max, true);
        let len_fc2 = Linear::new(&mut root.pp("length.fc2"), cfg.l_max, cfg.d_l, true);
        let w = cfg.decoder_width();
        let word_embed = Embedding::new(&mut root.pp("decoder.embed"), cfg.c_cap, d);
        let decoder = LstmCell::new(&mut root.pp("decoder.lstm"), d, w);
        let attention = cfg.variant.uses_attention().then(|| {
            let mut pb = root.pp("decoder.attention");
            Attention {
                q: Linear::new(&mut pb.pp("q"), w, w, true),
                k: Linear::new(&mut pb.pp("k"), d, w, true),
                v: Linear::new(&mut pb.pp("v"), d, w, true),
                width: w,
            }
        });
        let out = Linear::new(&mut root.pp("decoder.out"), w, cfg.c_cap, true);
        Ok(Self {
            cfg: cfg.clone(),
            audio,
            cap_head,
            meta_head,
            meta_embed,
            encoder,
            len_fc1,
            len_fc2,
            word_embed,
            decoder,
            attention,
            out,
        })
    }

    fn check_input(&self, g: &Graph<'_>, x: NodeId) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.n_mels || s[3] != self.cfg.frames {
            return Err(Error::Shape(format!(
                "expected [B, 3, {}, {}], got {s:?}",
                self.cfg.n_mels, self.cfg.frames
            )));
        }
        Ok(())
    }

    /// `x: [B, 3, F, T] -> A: [B, T_a, D]`.
    pub fn audio_embed(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        self.check_input(g, x)?;
        let b = g.shape(x)[0];
        Ok(match &self.audio {
            AudioEmbed::Cnn { blocks, fc1, fc2 } => {
                let mut y = x;
                for blk in blocks {
                    y = blk.forward(g, y);
                }
                let s = g.shape(y).to_vec();
                let y = g.permute(y, &[0, 3, 1, 2]);
                let y = g.reshape(y, &[b, s[3], s[1] * s[2]]);
                let y = fc1.forward(g, y);
                let y = g.relu(y);
                let y = fc2.forward(g, y);
                g.relu(y)
            }
            AudioEmbed::Transformer { block, fc, encoder } => {
                let y = block.forward(g, x);
                let s = g.shape(y).to_vec();
                let y = g.permute(y, &[0, 3, 1, 2]);
                let y = g.reshape(y, &[b, s[3], s[1] * s[2]]);
                let mut y = fc.forward(g, y);
                for _ in 0..2 {
                    y = encoder.forward(g, y);
                    y = keep_even(g, y);
                }
                y
            }
        })
    }

    /// Caption keyword probabilities `[B, C_key]`.
    pub fn caption_keywords(&self, g: &mut Graph<'_>, a: NodeId) -> NodeId {
        self.cap_head.forward(g, a)
    }

    /// Meta keyword probabilities, selected indices and their embedding `[B, K_m, D]`.
    pub fn meta_keywords(&self, g: &mut Graph<'_>, a: NodeId) -> Option<(NodeId, Vec<Vec<usize>>, NodeId)> {
        let head = self.meta_head.as_ref()?;
        let embed = self.meta_embed.as_ref()?;
        let p = head.forward(g, a);
        let k = self.cfg.meta_slots();
        let pv = g.value(p).clone();
        let b = pv.dim(0);
        let ids: Vec<Vec<usize>> = (0..b).map(|i| top_k(pv.row(i), k)).collect();
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let m = embed.forward(g, &flat);
        let m = g.reshape(m, &[b, k, self.cfg.d]);
        Some((p, ids, m))
    }

    pub fn encode(&self, g: &mut Graph<'_>, x: NodeId) -> Result<Encoded> {
        let a = self.audio_embed(g, x)?;
        let p_cap = self.caption_keywords(g, a);
        let meta = self.meta_keywords(g, a);
        let seq = match &meta {
            Some((_, _, m)) => g.concat(&[*m, a, *m], 1),
            None => a,
        };
        let encoder_steps = g.shape(seq)[1];
        let out = self.encoder.forward(g, seq);
        let (h, c) = (out.h, out.c);
        let hc = g.concat(&[h, c], 1);
        let len_logits = self.len_fc1.forward(g, hc);
        let p_len = g.softmax(len_logits);
        let l = self.len_fc2.forward(g, p_len);
        let h0 = g.concat(&[h, l], 1);
        let c0 = g.concat(&[c, l], 1);
        let (p_meta, meta_ids, m) = match meta {
            Some((p, ids, m)) => (Some(p), ids, Some(m)),
            None => (None, Vec::new(), None),
        };
        Ok(Encoded {
            a,
            p_cap,
            p_meta,
            meta_ids,
            m,
            encoder_steps,
            h,
            c,
            len_logits,
            p_len,
            l,
            h0,
            c0,
        })
    }

    /// Word embeddings `[B, N, D]` for id sequences of equal length.
    pub fn embed_words(&self, g: &mut Graph<'_>, ids: &[Vec<u32>]) -> NodeId {
        let n = ids.first().map_or(0, Vec::len);
        let flat: Vec<usize> = ids
            .iter()
            .flat_map(|s| {
                assert_eq!(s.len(), n, "ragged decoder input");
                s.iter().map(|&i| i as usize)
            })
            .collect();
        let e = self.word_embed.forward(g, &flat);
        g.reshape(e, &[ids.len(), n, self.cfg.d])
    }

    /// Run the decoder over `emb: [B, n, D]` from state `(h, c)`, attending to `m: [B, K, D]`.
    /// Returns log-posteriors `[B, n, C_cap]` and the final state.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        emb: NodeId,
        h: NodeId,
        c: NodeId,
        m: Option<NodeId>,
    ) -> (NodeId, NodeId, NodeId) {
        let (b, n) = (g.shape(emb)[0], g.shape(emb)[1]);
        let w = self.cfg.decoder_width();
        let xp = self.decoder.project_inputs(g, emb);
        let (mut h, mut c) = (h, c);
        let mut rows = Vec::with_capacity(n);
        for step in 0..n {
            let xs = g.narrow(xp, 1, step, 1);
            let xs = g.reshape(xs, &[b, 4 * w]);
            let (h2, c2) = self.decoder.step_projected(g, xs, h, c);
            h = h2;
            c = c2;
            rows.push(g.reshape(h, &[b, 1, w]));
        }
        let hs = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 1) };
        let feat = match (&self.attention, m) {
            (Some(att), Some(m)) => {
                let q = att.q.forward(g, hs);
                let k = att.k.forward(g, m);
                let v = att.v.forward(g, m);
                let s = g.matmul_t(q, k, true);
                let s = g.scale(s, 1.0 / (att.width as f64).sqrt());
                let a = g.softmax(s);
                let mp = g.matmul(a, v);
                let t = g.tanh(mp);
                g.add(hs, t)
            }
            _ => hs,
        };
        let logits = self.out.forward(g, feat);
        (g.log_softmax(logits), h, c)
    }

    /// Teacher-forced pass over `N` decoder steps.
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, input: &DecoderInput<'_>) -> Result<Forward> {
        let enc = self.encode(g, x)?;
        let e1 = self.embed_words(g, input.ids);
        let emb = match input.mix {
            Some((other, beta)) if self.cfg.text_mixup => {
                let e2 = self.embed_words(g, other);
                let a = g.scale(e1, beta);
                let b = g.scale(e2, 1.0 - beta);
                g.add(a, b)
            }
            _ => e1,
        };
        let (log_probs, _, _) = self.decode(g, emb, enc.h0, enc.c0, enc.m);
        Ok(Forward { enc, log_probs })
    }
}
