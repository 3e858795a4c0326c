//! Test-time augmentation, ensemble scoring and caption generation.

use std::collections::BTreeMap;

use audiocap_core::audio::{crop_or_pad, featurize, FeatureTensor, FrontendConfig, Waveform};
use audiocap_core::beam::{beam_search, BeamConfig, BeamResult, StepScorer};
use audiocap_core::text::WordVocabulary;
use audiocap_core::{Error, Result};
use audiocap_nn::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::{batch_tensor, CaptionNet};

/// A network with its parameters, ready for inference.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub net: CaptionNet,
    pub store: ParamStore,
    pub vocab_hash: String,
}

/// How per-crop posteriors are combined inside one model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropAveraging {
    /// Mean of log-probabilities.
    #[default]
    LogProb,
    /// Log of the mean probability.
    Prob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub beam: usize,
    pub block_n: usize,
    pub tta: usize,
    #[serde(default)]
    pub averaging: CropAveraging,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            beam: 5,
            block_n: 2,
            tta: 5,
            averaging: CropAveraging::LogProb,
        }
    }
}

impl DecodeSettings {
    /// Beam 1, one crop.
    pub fn greedy() -> Self {
        Self {
            beam: 1,
            tta: 1,
            ..Self::default()
        }
    }
}

/// `count` independent crop/pad results of `x` to `frames`.
pub fn tta_crops<R: Rng + ?Sized>(x: &FeatureTensor, count: usize, frames: usize, rng: &mut R) -> Vec<FeatureTensor> {
    (0..count.max(1)).map(|_| crop_or_pad(x, frames, rng)).collect()
}

struct Member {
    model: usize,
    h0: Tensor,
    c0: Tensor,
    /// `[K, D]` meta keyword embedding.
    m: Option<Tensor>,
}

/// [`StepScorer`] averaging log-posteriors over crops, then over models.
pub struct EnsembleScorer<'a> {
    models: &'a [LoadedModel],
    members: Vec<Member>,
    crops_per_model: usize,
    averaging: CropAveraging,
    c_cap: usize,
}

fn check_vocab(models: &[LoadedModel]) -> Result<usize> {
    let first = models.first().ok_or_else(|| Error::Config("empty ensemble".into()))?;
    for m in models {
        if m.vocab_hash != first.vocab_hash || m.net.cfg.c_cap != first.net.cfg.c_cap {
            return Err(Error::Config(format!(
                "ensemble members use different word vocabularies ({} vs {})",
                first.vocab_hash, m.vocab_hash
            )));
        }
    }
    Ok(first.net.cfg.c_cap)
}

/// Crops shared by every model with the same input length, so identical
/// members see identical inputs.
fn crops_for(models: &[LoadedModel], x: &FeatureTensor, tta: usize, seed: u64) -> BTreeMap<(usize, bool), Vec<FeatureTensor>> {
    let mut out = BTreeMap::new();
    let single = x.as_single();
    for m in models {
        let key = (m.net.cfg.frames, m.net.cfg.single);
        out.entry(key).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (key.0 as u64).rotate_left(17));
            let src = if key.1 { &single } else { x };
            tta_crops(src, tta, key.0, &mut rng)
        });
    }
    out
}

impl<'a> EnsembleScorer<'a> {
    /// Encode every crop with every model. `x` holds the three-channel features;
    /// single-channel members see its log-mel channel.
    pub fn new(models: &'a [LoadedModel], x: &FeatureTensor, settings: &DecodeSettings, seed: u64) -> Result<Self> {
        let c_cap = check_vocab(models)?;
        let crops = crops_for(models, x, settings.tta, seed);
        let mut members = Vec::new();
        let mut crops_per_model = 0;
        for (mi, model) in models.iter().enumerate() {
            let cs = &crops[&(model.net.cfg.frames, model.net.cfg.single)];
            crops_per_model = cs.len();
            let refs: Vec<&FeatureTensor> = cs.iter().collect();
            let mut g = Graph::inference(&model.store);
            let xin = g.constant(batch_tensor(&refs)?);
            let enc = model.net.encode(&mut g, xin)?;
            let h0 = g.value(enc.h0).clone();
            let c0 = g.value(enc.c0).clone();
            let m = enc.m.map(|m| g.value(m).clone());
            for k in 0..cs.len() {
                let w = h0.dim(1);
                members.push(Member {
                    model: mi,
                    h0: h0.narrow(0, k, 1).reshape(vec![w]),
                    c0: c0.narrow(0, k, 1).reshape(vec![w]),
                    m: m.as_ref().map(|m| {
                        let (kk, d) = (m.dim(1), m.dim(2));
                        m.narrow(0, k, 1).reshape(vec![kk, d])
                    }),
                });
            }
        }
        Ok(Self {
            models,
            members,
            crops_per_model,
            averaging: settings.averaging,
            c_cap,
        })
    }
}

fn stack(rows: &[&Tensor]) -> Tensor {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(rows[0].shape());
    let mut data = Vec::with_capacity(rows.len() * rows[0].numel());
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::new(shape, data)
}

/// Per-member decoder states `(h, c)`.
pub type EnsembleState = Vec<(Tensor, Tensor)>;

impl StepScorer for EnsembleScorer<'_> {
    type State = EnsembleState;

    fn initial_state(&mut self) -> Result<EnsembleState> {
        Ok(self.members.iter().map(|m| (m.h0.clone(), m.c0.clone())).collect())
    }

    fn step(&mut self, hyps: &[(&[u32], &EnsembleState)]) -> Result<Vec<(Vec<f64>, EnsembleState)>> {
        let nh = hyps.len();
        let c = self.c_cap;
        let last: Vec<Vec<u32>> = hyps
            .iter()
            .map(|(p, _)| vec![*p.last().unwrap_or(&WordVocabulary::BOS)])
            .collect();
        let mut new_states: Vec<EnsembleState> = vec![Vec::with_capacity(self.members.len()); nh];
        let mut model_sum = vec![vec![0.0; c]; nh];
        let mut crop_acc = vec![vec![0.0; c]; nh];
        for (k, member) in self.members.iter().enumerate() {
            let model = &self.models[member.model];
            let mut g = Graph::inference(&model.store);
            let hs: Vec<&Tensor> = hyps.iter().map(|(_, s)| &s[k].0).collect();
            let cs: Vec<&Tensor> = hyps.iter().map(|(_, s)| &s[k].1).collect();
            let h = g.constant(stack(&hs));
            let cc = g.constant(stack(&cs));
            let m = member.m.as_ref().map(|m| {
                let tiled: Vec<&Tensor> = (0..nh).map(|_| m).collect();
                g.constant(stack(&tiled))
            });
            let emb = model.net.embed_words(&mut g, &last);
            let (lp, h2, c2) = model.net.decode(&mut g, emb, h, cc, m);
            let lp = g.value(lp);
            let (h2, c2) = (g.value(h2), g.value(c2));
            for i in 0..nh {
                let row = &lp.data()[i * c..(i + 1) * c];
                for (acc, &v) in crop_acc[i].iter_mut().zip(row) {
                    *acc += match self.averaging {
                        CropAveraging::LogProb => v,
                        CropAveraging::Prob => v.exp(),
                    };
                }
                let w = h2.dim(1);
                new_states[i].push((h2.narrow(0, i, 1).reshape(vec![w]), c2.narrow(0, i, 1).reshape(vec![w])));
            }
            if (k + 1) % self.crops_per_model == 0 {
                let n = self.crops_per_model as f64;
                for (acc, sum) in crop_acc.iter_mut().zip(model_sum.iter_mut()) {
                    for (a, s) in acc.iter_mut().zip(sum.iter_mut()) {
                        *s += match self.averaging {
                            CropAveraging::LogProb => *a / n,
                            CropAveraging::Prob => (*a / n).ln(),
                        };
                        *a = 0.0;
                    }
                }
            }
        }
        let nm = self.models.len() as f64;
        Ok(model_sum
            .into_iter()
            .zip(new_states)
            .map(|(mut lp, st)| {
                for v in &mut lp {
                    *v /= nm;
                }
                lp[WordVocabulary::BOS as usize] = f64::NEG_INFINITY;
                lp[WordVocabulary::PAD as usize] = f64::NEG_INFINITY;
                (lp, st)
            })
            .collect())
    }
}

/// Beam search over an ensemble for one clip's three-channel features.
pub fn caption_features(models: &[LoadedModel], x: &FeatureTensor, settings: &DecodeSettings, seed: u64) -> Result<BeamResult> {
    let mut scorer = EnsembleScorer::new(models, x, settings, seed)?;
    let max_len = models.iter().map(|m| m.net.cfg.n_steps).min().unwrap_or(1);
    let cfg = BeamConfig {
        beam: settings.beam,
        block_n: settings.block_n,
        max_len,
        bos: WordVocabulary::BOS,
        eos: WordVocabulary::EOS,
    };
    beam_search(&mut scorer, &cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub caption: String,
    pub logprob: f64,
    pub tokens: Vec<u32>,
}

/// Space-joined words of a decoded id sequence (specials dropped).
pub fn detokenize(vocab: &WordVocabulary, ids: &[u32]) -> String {
    ids.iter()
        .filter(|&&i| !WordVocabulary::is_special(i) || i == WordVocabulary::UNK)
        .map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Featurize, crop, beam-search and detokenize.
pub fn caption(
    models: &[LoadedModel],
    vocab: &WordVocabulary,
    wave: &Waveform,
    frontend: &FrontendConfig,
    settings: &DecodeSettings,
    seed: u64,
) -> Result<CaptionOutput> {
    if models.iter().any(|m| m.vocab_hash != vocab.hash()) {
        return Err(Error::Config("checkpoint vocabulary does not match the supplied vocabulary".into()));
    }
    let x = featurize(wave, frontend, false)?;
    let r = caption_features(models, &x, settings, seed)?;
    Ok(CaptionOutput {
        caption: detokenize(vocab, &r.tokens),
        logprob: r.logprob,
        tokens: r.tokens,
    })
}
