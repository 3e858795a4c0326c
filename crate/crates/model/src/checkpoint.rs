//! Checkpoint directories: `config.json`, `params.safetensors` and the vocabularies.

use std::path::Path;

use audiocap_nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Vocabularies;
use crate::decode::LoadedModel;
use crate::error::{ModelError, Result};
use crate::net::CaptionNet;
use crate::train::TrainConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: u64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_hash: String,
    /// Optimizer steps taken when these parameters were current.
    pub step: u64,
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub validation: Vec<ValidationRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

/// Create a freshly initialised network.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(CaptionNet, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = CaptionNet::new(cfg, &mut store, &mut rng)?;
    Ok((net, store))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path, vocabs: &Vocabularies) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_vec_pretty(&self.meta)?)?;
        self.store.save(&dir.join(PARAMS_FILE))?;
        vocabs.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, Vocabularies)> {
        let cfg_path = dir.join(CONFIG_FILE);
        let bytes = std::fs::read(&cfg_path).map_err(|e| {
            ModelError::Core(audiocap_core::Error::Config(format!(
                "cannot read checkpoint {}: {e}",
                cfg_path.display()
            )))
        })?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
        let (_, mut store) = build_model(&meta.model, 0)?;
        store.load(&dir.join(PARAMS_FILE))?;
        let vocabs = Vocabularies::load(dir)?;
        if vocabs.words.hash() != meta.vocab_hash {
            return Err(audiocap_core::Error::Config(format!(
                "{}: vocabulary hash does not match the checkpoint",
                dir.display()
            ))
            .into());
        }
        Ok((Self { meta, store }, vocabs))
    }

    /// Parameter ids follow construction order, so a fresh network of the same
    /// configuration addresses the stored tensors directly.
    pub fn to_model(&self) -> Result<LoadedModel> {
        let (net, fresh) = build_model(&self.meta.model, 0)?;
        if fresh.len() != self.store.len() {
            return Err(audiocap_nn::NnError::Shape("checkpoint does not match its configuration".into()).into());
        }
        Ok(LoadedModel {
            net,
            store: self.store.clone(),
            vocab_hash: self.meta.vocab_hash.clone(),
        })
    }
}

/// Load several checkpoints as an ensemble; all must share one vocabulary.
pub fn load_ensemble(dirs: &[impl AsRef<Path>]) -> Result<(Vec<LoadedModel>, Vocabularies)> {
    let mut models = Vec::new();
    let mut vocab: Option<Vocabularies> = None;
    for d in dirs {
        let (ck, v) = Checkpoint::load(d.as_ref())?;
        if let Some(first) = &vocab {
            if first.words.hash() != v.words.hash() {
                return Err(audiocap_core::Error::Config(format!(
                    "{} uses a different word vocabulary",
                    d.as_ref().display()
                ))
                .into());
            }
        } else {
            vocab = Some(v);
        }
        models.push(ck.to_model()?);
    }
    let vocab = vocab.ok_or_else(|| audiocap_core::Error::Config("no checkpoints given".into()))?;
    Ok((models, vocab))
}
