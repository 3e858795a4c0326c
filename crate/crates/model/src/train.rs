//! Optimisation loop, validation-based selection and variant sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};

use audiocap_core::audio::{crop_or_pad, FeatureTensor};
use audiocap_core::metrics::{cider, EvalPair};
use audiocap_core::sampler::{
    audio_selection_distribution, caption_selection_distribution, draw_mixup, sample_index, TfidfReplacer,
};
use audiocap_core::Error;
use audiocap_nn::{AdamW, Graph, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{build_model, Checkpoint, CheckpointMeta, ValidationRecord};
use crate::config::{ModelConfig, VariantName};
use crate::data::{Dataset, TrainItem, VocabConfig, Vocabularies};
use crate::decode::{caption_features, detokenize, DecodeSettings, LoadedModel};
use crate::error::{ModelError, Result};
use crate::net::{batch_tensor, DecoderInput};
use crate::objectives::{
    total_loss, word_loss, word_loss_weights, ItemLabels, LossBreakdown, LossSettings, MixedLabels,
    PARAM2_META_WEIGHT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
    Miniature,
}

impl Profile {
    pub fn model(self, name: VariantName) -> ModelConfig {
        match self {
            Profile::Paper => ModelConfig::paper(name),
            Profile::Desk => ModelConfig::desk(name),
            Profile::Miniature => ModelConfig::miniature(name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub enabled: bool,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaceConfig {
    pub enabled: bool,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub idf_audio: bool,
    pub idf_caption: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mixup: MixupConfig,
    pub tfidf_replace: ReplaceConfig,
    pub sampling: SamplingConfig,
}

impl AugmentConfig {
    pub fn all() -> Self {
        Self {
            mixup: MixupConfig {
                enabled: true,
                alpha: 0.4,
            },
            tfidf_replace: ReplaceConfig {
                enabled: true,
                rate: 0.05,
            },
            sampling: SamplingConfig {
                idf_audio: true,
                idf_caption: true,
            },
        }
    }

    pub fn none() -> Self {
        let mut a = Self::all();
        a.mixup.enabled = false;
        a.tfidf_replace.enabled = false;
        a.sampling.idf_audio = false;
        a.sampling.idf_caption = false;
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: VariantName,
    pub profile: Profile,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub label_smoothing: f64,
    pub cooccurrence: bool,
    /// `mixup`, `tfidf_replace` and `sampling` sections at the top level.
    #[serde(flatten)]
    pub augment: AugmentConfig,
    pub vocab: VocabConfig,
    /// Greedy-decode CIDEr on the validation split after every epoch.
    pub validate: bool,
}

impl TrainConfig {
    /// Full-data hyper-parameters: AdamW, lr 1e-4, batch 48, 300 epochs.
    pub fn full_data(variant: VariantName) -> Self {
        Self {
            variant,
            profile: Profile::Paper,
            lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 48,
            epochs: 300,
            max_steps: None,
            seed: 0,
            label_smoothing: 0.1,
            cooccurrence: true,
            augment: AugmentConfig::all(),
            vocab: VocabConfig::default(),
            validate: true,
        }
    }

    /// Small network, batch 8, T = 64, thresholds suited to a toy corpus.
    pub fn desk(variant: VariantName) -> Self {
        Self {
            profile: Profile::Desk,
            lr: 3e-3,
            batch_size: 8,
            epochs: 40,
            vocab: VocabConfig {
                word_min_count: 0,
                keyword_min_count: 0,
            },
            ..Self::full_data(variant)
        }
    }

    /// Desk profile with augmentation and smoothing off, for memorising a tiny corpus.
    pub fn overfit(variant: VariantName) -> Self {
        Self {
            label_smoothing: 0.0,
            augment: AugmentConfig::none(),
            max_steps: Some(300),
            epochs: 1000,
            validate: false,
            ..Self::desk(variant)
        }
    }

    pub fn model_config(&self, vocabs: &Vocabularies) -> ModelConfig {
        self.profile
            .model(self.variant)
            .with_vocab(vocabs.words.len(), vocabs.keywords.len())
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            label_smoothing: self.label_smoothing,
            meta_weight: if self.variant.param2 { PARAM2_META_WEIGHT } else { 1.0 },
            cooccurrence: self.cooccurrence,
        }
    }

    pub fn validate_config(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.label_smoothing)
            && self.augment.mixup.alpha > 0.0
            && self.augment.tfidf_replace.rate >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("training hyper-parameters out of range".into()).into())
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Step {
        epoch: usize,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Validation(ValidationRecord),
}

pub struct TrainOutcome {
    /// Best-validation parameters (the final ones when nothing was validated).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<LossBreakdown>,
}

/// Sampling state shared across steps.
struct Sampler {
    audio: Vec<f64>,
    captions: Vec<Vec<f64>>,
    replacer: Option<TfidfReplacer>,
}

impl Sampler {
    fn new(items: &[TrainItem], cfg: &TrainConfig, vocabs: &Vocabularies) -> Self {
        let n = items.len();
        let per_item: Vec<Vec<Vec<String>>> = items.iter().map(|i| i.captions.clone()).collect();
        let audio = if cfg.augment.sampling.idf_audio {
            audio_selection_distribution(&per_item)
        } else {
            vec![1.0 / n as f64; n]
        };
        let uniform = !cfg.augment.sampling.idf_caption || cfg.variant.param2;
        let captions = items
            .iter()
            .map(|i| caption_selection_distribution(&i.captions, uniform))
            .collect();
        let replacer = cfg.augment.tfidf_replace.enabled.then(|| {
            let docs: Vec<Vec<String>> = per_item.into_iter().flatten().collect();
            TfidfReplacer::new(&docs, cfg.augment.tfidf_replace.rate, |w| vocabs.words.contains(w))
        });
        Self {
            audio,
            captions,
            replacer,
        }
    }
}

fn labels_for(item: &TrainItem, k: usize, tokens: &[String], vocabs: &Vocabularies, mcfg: &ModelConfig) -> ItemLabels {
    let enc = vocabs.words.encode(tokens, mcfg.n_steps, mcfg.l_max);
    ItemLabels {
        ids: enc.ids,
        length: enc.length,
        caption_keywords: item.caption_keywords[k].clone(),
        meta_keywords: item.meta_keywords.clone(),
        cooc_mask: item.cooc_mask.clone(),
    }
}

fn input_features(item: &TrainItem, mcfg: &ModelConfig) -> Result<FeatureTensor> {
    if item.features.n_mels != mcfg.n_mels {
        return Err(Error::Shape(format!(
            "{}: {} mel bins, model expects {}",
            item.file_name, item.features.n_mels, mcfg.n_mels
        ))
        .into());
    }
    Ok(if mcfg.single {
        item.features.as_single()
    } else {
        item.features.clone()
    })
}

/// Mean teacher-forced word loss (no smoothing) over every caption of `items`,
/// inference mode, first `frames` frames of each clip.
pub fn teacher_forced_word_loss(model: &LoadedModel, items: &[TrainItem], vocabs: &Vocabularies) -> Result<f64> {
    let mcfg = &model.net.cfg;
    let mut total = 0.0;
    let mut count = 0usize;
    for item in items {
        let x = input_features(item, mcfg)?.window(0, mcfg.frames);
        let mut seen = std::collections::BTreeSet::new();
        for (k, tokens) in item.captions.iter().enumerate() {
            if !seen.insert(tokens.clone()) {
                continue;
            }
            let labels = labels_for(item, k, tokens, vocabs, mcfg);
            let mut g = Graph::inference(&model.store);
            let xin = g.constant(batch_tensor(&[&x])?);
            let ids = [labels.ids.clone()];
            let fwd = model.net.forward(&mut g, xin, &DecoderInput { ids: &ids, mix: None })?;
            let w = word_loss_weights(&[labels.targets()], mcfg.c_cap, 0.0);
            let l = word_loss(&mut g, fwd.log_probs, w);
            total += g.value(l).to_scalar();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Greedy-decode CIDEr of `model` on `items` against their references.
pub fn validation_cider(model: &LoadedModel, items: &[TrainItem], vocabs: &Vocabularies, seed: u64) -> Result<f64> {
    let settings = DecodeSettings::greedy();
    let mut pairs = Vec::with_capacity(items.len());
    for item in items {
        let models = std::slice::from_ref(model);
        let r = caption_features(models, &item.features, &settings, seed)?;
        pairs.push(EvalPair::from_text(&detokenize(&vocabs.words, &r.tokens), &item.references));
    }
    Ok(if pairs.is_empty() { 0.0 } else { cider(&pairs) })
}

fn write_line(log: &mut dyn Write, line: &LogLine) -> Result<()> {
    serde_json::to_writer(&mut *log, line)?;
    log.write_all(b"\n")?;
    Ok(())
}

fn dump_failure(dir: Option<&Path>, step: u64, names: &[&str], loss: &LossBreakdown) -> Option<PathBuf> {
    let dir = dir?;
    let path = dir.join(format!("nonfinite_step{step}.json"));
    let body = serde_json::json!({ "step": step, "batch": names, "loss": loss });
    std::fs::create_dir_all(dir).ok()?;
    std::fs::write(&path, serde_json::to_vec_pretty(&body).ok()?).ok()?;
    Some(path)
}

/// Train one network. Every step: select clips (IDF-weighted or uniform),
/// select and augment a caption, crop, mix, forward, loss, AdamW step.
pub fn train(
    data: &Dataset,
    vocabs: &Vocabularies,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate_config()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training items".into()).into());
    }
    let mcfg = cfg.model_config(vocabs);
    let (net, mut store) = build_model(&mcfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let feats: Vec<FeatureTensor> = data.train.iter().map(|i| input_features(i, &mcfg)).collect::<Result<_>>()?;
    let sampler = Sampler::new(&data.train, cfg, vocabs);
    let settings = cfg.loss_settings();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let mut total_steps = steps_per_epoch * cfg.epochs as u64;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let mut history = Vec::with_capacity(total_steps as usize);
    let mut validation = Vec::new();
    let mut best: Option<(f64, ParamStore, u64, usize)> = None;
    let hash = vocabs.words.hash();
    let meta_for = |store: &ParamStore, step, epoch, best_score, validation: &Vec<ValidationRecord>| Checkpoint {
        meta: CheckpointMeta {
            model: mcfg.clone(),
            train: cfg.clone(),
            vocab_hash: hash.clone(),
            step,
            epoch,
            best_score,
            validation: validation.clone(),
        },
        store: store.clone(),
    };

    for step in 0..total_steps {
        let epoch = (step / steps_per_epoch) as usize;
        let mut picks = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        let mut xs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = sample_index(&sampler.audio, &mut rng);
            let item = &data.train[i];
            let k = sample_index(&sampler.captions[i], &mut rng);
            let tokens = match &sampler.replacer {
                Some(r) => {
                    let protect = |w: &str| {
                        vocabs
                            .keywords
                            .lookup(w)
                            .is_some_and(|kw| item.caption_keywords[k].contains(&kw))
                    };
                    r.replace(&item.captions[k], protect, &mut rng)
                }
                None => item.captions[k].clone(),
            };
            labels.push(labels_for(item, k, &tokens, vocabs, &mcfg));
            xs.push(crop_or_pad(&feats[i], mcfg.frames, &mut rng));
            picks.push(i);
        }
        let mix = cfg
            .augment
            .mixup
            .enabled
            .then(|| draw_mixup(cfg.batch_size, cfg.augment.mixup.alpha, &mut rng));
        let xs: Vec<FeatureTensor> = match &mix {
            Some(m) => xs
                .iter()
                .zip(&m.partners)
                .map(|(x, &p)| x.mix(&xs[p], m.beta))
                .collect::<audiocap_core::Result<_>>()?,
            None => xs,
        };
        let ids: Vec<Vec<u32>> = labels.iter().map(|l| l.ids.clone()).collect();
        let partner_ids: Vec<Vec<u32>> = match &mix {
            Some(m) => m.partners.iter().map(|&p| ids[p].clone()).collect(),
            None => Vec::new(),
        };
        let label_refs: Vec<&ItemLabels> = labels.iter().collect();
        let partner_refs: Vec<&ItemLabels> = match &mix {
            Some(m) => m.partners.iter().map(|&p| &labels[p]).collect(),
            None => Vec::new(),
        };

        let mut g = Graph::train(&store);
        let refs: Vec<&FeatureTensor> = xs.iter().collect();
        let xin = g.constant(batch_tensor(&refs)?);
        let input = DecoderInput {
            ids: &ids,
            mix: mix.as_ref().map(|m| (partner_ids.as_slice(), m.beta)),
        };
        let fwd = net.forward(&mut g, xin, &input)?;
        let loss = total_loss(
            &mut g,
            &fwd,
            &label_refs,
            mix.as_ref().map(|m| MixedLabels {
                partners: &partner_refs,
                beta: m.beta,
            }),
            &data.cap_priors,
            &data.meta_priors,
            opt.steps_taken(),
            &settings,
        );
        let breakdown = loss.breakdown;
        if !breakdown.total.is_finite() {
            let names: Vec<&str> = picks.iter().map(|&i| data.train[i].file_name.as_str()).collect();
            let dump = dump_failure(dump_dir, step, &names, &breakdown);
            return Err(ModelError::NonFinite {
                step,
                breakdown: serde_json::to_string(&breakdown).unwrap_or_default(),
                dump,
            });
        }
        let grads = g.backward(loss.node);
        let pg = g.param_grads(&grads);
        let updates = g.take_buffer_updates();
        drop(g);
        opt.step(&mut store, &pg);
        for u in updates {
            store.set(u.id, u.value);
        }
        write_line(
            log,
            &LogLine::Step {
                epoch,
                loss: breakdown.clone(),
            },
        )?;
        history.push(breakdown);

        let epoch_done = (step + 1) % steps_per_epoch == 0 || step + 1 == total_steps;
        if epoch_done && cfg.validate && !data.valid.is_empty() {
            let model = LoadedModel {
                net: net.clone(),
                store: store.clone(),
                vocab_hash: hash.clone(),
            };
            let score = validation_cider(&model, &data.valid, vocabs, cfg.seed)?;
            let rec = ValidationRecord {
                epoch,
                step: step + 1,
                cider: score,
            };
            write_line(log, &LogLine::Validation(rec.clone()))?;
            validation.push(rec);
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, store.clone(), step + 1, epoch));
            }
        }
    }
    let last_epoch = (total_steps.saturating_sub(1) / steps_per_epoch) as usize;
    let last = meta_for(&store, total_steps, last_epoch, best.as_ref().map(|b| b.0), &validation);
    let best = match &best {
        Some((score, s, step, epoch)) => meta_for(s, *step, *epoch, Some(*score), &validation),
        None => last.clone(),
    };
    Ok(TrainOutcome { best, last, history })
}

/// Named ensemble recipes with their per-variant model counts.
pub fn recipe(name: &str) -> Result<Vec<VariantName>> {
    let spec: &[(&str, usize)] = match name {
        "submission1" => &[
            ("Model1", 2),
            ("Model1single", 2),
            ("Model1param2", 2),
            ("Model2", 2),
            ("Model3", 2),
            ("Model3param2", 2),
            ("Model4", 2),
            ("Model4single", 2),
            ("Model4param2", 4),
        ],
        "submission2" => &[
            ("Model1", 5),
            ("Model1single", 5),
            ("Model1param2", 5),
            ("Model2", 5),
            ("Model3", 5),
            ("Model3param2", 5),
            ("Model4", 5),
            ("Model4single", 5),
            ("Model4param2", 10),
        ],
        "submission3" => &[
            ("Model1", 2),
            ("Model3", 2),
            ("Model4", 4),
            ("Model5single", 2),
            ("Model6single", 2),
        ],
        "submission4" => &[
            ("Model1", 5),
            ("Model3", 5),
            ("Model4", 10),
            ("Model5single", 5),
            ("Model6single", 5),
        ],
        _ => return Err(Error::Config(format!("unknown recipe {name:?}")).into()),
    };
    let mut out = Vec::new();
    for (n, count) in spec {
        let v: VariantName = n.parse()?;
        out.extend(std::iter::repeat_n(v, *count));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub variant: VariantName,
    /// Checkpoint directory relative to the manifest.
    pub dir: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub members: Vec<EnsembleMember>,
}

pub const ENSEMBLE_FILE: &str = "ensemble.json";

impl EnsembleManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(ENSEMBLE_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(ENSEMBLE_FILE))?)?)
    }

    pub fn dirs(&self, root: &Path) -> Vec<PathBuf> {
        self.members.iter().map(|m| root.join(&m.dir)).collect()
    }
}

/// Train one checkpoint per entry of `variants`; repeated names get distinct seeds.
pub fn sweep(
    variants: &[VariantName],
    base: &TrainConfig,
    data: &Dataset,
    vocabs: &Vocabularies,
    out: &Path,
) -> Result<EnsembleManifest> {
    std::fs::create_dir_all(out)?;
    let mut members = Vec::with_capacity(variants.len());
    for (i, &variant) in variants.iter().enumerate() {
        let seed = base.seed.wrapping_add(i as u64);
        let cfg = TrainConfig {
            variant,
            seed,
            ..base.clone()
        };
        let dir = format!("{i:02}_{variant}");
        let path = out.join(&dir);
        std::fs::create_dir_all(&path)?;
        let mut log = std::fs::File::create(path.join("train_log.jsonl"))?;
        let outcome = train(data, vocabs, &cfg, &mut log, Some(&path))?;
        outcome.best.save(&path, vocabs)?;
        members.push(EnsembleMember { variant, dir, seed });
    }
    let manifest = EnsembleManifest { members };
    manifest.save(out)?;
    Ok(manifest)
}
