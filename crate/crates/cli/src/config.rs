//! JSON configuration files: partial overrides merged onto named defaults,
//! with unknown keys rejected before any stage runs.

use std::path::{Path, PathBuf};

use audiocap_core::audio::FrontendConfig;
use audiocap_core::ingest::Split;
use audiocap_model::train::recipe;
use audiocap_model::{DecodeSettings, Profile, TrainConfig, VariantName};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

/// Environment variable that overrides every seed.
pub const SEED_ENV: &str = "AC_SEED";

/// `seed`, unless `AC_SEED` is set.
pub fn effective_seed(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

/// Recursively overwrite `base` with the entries of `over`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Dotted paths present in `user` but absent from `reference`.
pub fn unknown_keys(user: &Value, reference: &Value) -> Vec<String> {
    fn walk(u: &Value, r: &Value, prefix: &str, out: &mut Vec<String>) {
        let (Value::Object(u), Value::Object(r)) = (u, r) else {
            return;
        };
        for (k, v) in u {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                Some(rv) => walk(v, rv, &path, out),
                None => out.push(path),
            }
        }
    }
    let mut out = Vec::new();
    walk(user, reference, "", &mut out);
    out
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, user: &Value, what: &str) -> Result<T> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Config(e.to_string()))?;
    let unknown = unknown_keys(user, &v);
    if !unknown.is_empty() {
        return Err(CliError::Config(format!("unknown {what} keys: {}", unknown.join(", "))));
    }
    merge(&mut v, user);
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("{what}: {e}")))
}

/// Defaults for a profile: `paper` is the full-data setting, `desk` and
/// `miniature` are the small configurations.
pub fn train_defaults(variant: VariantName, profile: Profile) -> TrainConfig {
    match profile {
        Profile::Paper => TrainConfig::full_data(variant),
        Profile::Desk => TrainConfig::desk(variant),
        Profile::Miniature => TrainConfig {
            profile: Profile::Miniature,
            ..TrainConfig::desk(variant)
        },
    }
}

/// Training configuration from a partial JSON object. `variant` is required;
/// `profile` defaults to `paper`.
pub fn train_config(user: &Value) -> Result<TrainConfig> {
    let obj = user
        .as_object()
        .ok_or_else(|| CliError::Config("training config must be a JSON object".into()))?;
    let variant: VariantName = obj
        .get("variant")
        .and_then(Value::as_str)
        .ok_or_else(|| CliError::Config("training config needs a \"variant\" name".into()))?
        .parse()?;
    let profile: Profile = match obj.get("profile") {
        Some(p) => serde_json::from_value(p.clone()).map_err(|e| CliError::Config(format!("profile: {e}")))?,
        None => Profile::Paper,
    };
    let cfg = overlay(&train_defaults(variant, profile), user, "train")?;
    cfg.validate_config()?;
    Ok(cfg)
}

pub fn read_json(path: &Path) -> Result<Value> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    train_config(&read_json(path)?)
}

/// Input files of the pipeline; relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub captions: PathBuf,
    pub metadata: PathBuf,
    pub audio_dir: PathBuf,
    pub lemma_table: PathBuf,
    #[serde(default)]
    pub valid_count: usize,
    #[serde(default)]
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum EnsembleChoice {
    Recipe(String),
    Variants(Vec<VariantName>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    work_dir: PathBuf,
    #[serde(default)]
    seed: u64,
    data: DataConfig,
    #[serde(default)]
    frontend: Option<Value>,
    train: Value,
    #[serde(default)]
    ensemble: Option<EnsembleChoice>,
    #[serde(default)]
    decode: Option<Value>,
    #[serde(default)]
    caption_split: Option<Split>,
}

/// A validated pipeline configuration with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub work_dir: PathBuf,
    pub seed: u64,
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub train: TrainConfig,
    /// Variants to train; one entry unless an ensemble is configured.
    pub variants: Vec<VariantName>,
    pub ensemble: Option<EnsembleChoice>,
    pub decode: DecodeSettings,
    pub caption_split: Split,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_value(&read_json(path)?, base)
    }

    /// Parse and validate; `AC_SEED` replaces the seed.
    pub fn from_value(v: &Value, base: &Path) -> Result<Self> {
        let raw: RawPipeline = serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("pipeline config: {e}")))?;
        let seed = effective_seed(raw.seed)?;
        if raw.train.get("seed").is_some() {
            return Err(CliError::Config("set the top-level \"seed\" instead of train.seed".into()));
        }
        let mut train = train_config(&raw.train)?;
        train.seed = seed;
        let frontend = match &raw.frontend {
            Some(f) => overlay(&FrontendConfig::default(), f, "frontend")?,
            None => FrontendConfig::default(),
        };
        let model = train.profile.model(train.variant);
        if frontend.n_mels != model.n_mels {
            return Err(CliError::Config(format!(
                "frontend.n_mels = {} but the {:?} profile expects {}",
                frontend.n_mels, train.profile, model.n_mels
            )));
        }
        let decode = match &raw.decode {
            Some(d) => overlay(&DecodeSettings::default(), d, "decode")?,
            None => DecodeSettings::default(),
        };
        if decode.beam == 0 || decode.tta == 0 {
            return Err(CliError::Config("decode.beam and decode.tta must be at least 1".into()));
        }
        let variants = match &raw.ensemble {
            None => vec![train.variant],
            Some(EnsembleChoice::Recipe(name)) => recipe(name)?,
            Some(EnsembleChoice::Variants(v)) if v.is_empty() => {
                return Err(CliError::Config("ensemble.variants is empty".into()))
            }
            Some(EnsembleChoice::Variants(v)) => v.clone(),
        };
        let caption_split = raw.caption_split.unwrap_or(if raw.data.test_count > 0 {
            Split::Test
        } else if raw.data.valid_count > 0 {
            Split::Valid
        } else {
            Split::Train
        });
        let data = DataConfig {
            captions: resolve(base, &raw.data.captions),
            metadata: resolve(base, &raw.data.metadata),
            audio_dir: resolve(base, &raw.data.audio_dir),
            lemma_table: resolve(base, &raw.data.lemma_table),
            ..raw.data
        };
        Ok(Self {
            work_dir: resolve(base, &raw.work_dir),
            seed,
            data,
            frontend,
            train,
            variants,
            ensemble: raw.ensemble,
            decode,
            caption_split,
        })
    }
}

