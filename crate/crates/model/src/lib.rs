//! Multi-task audio captioning network: model definition, losses, ensemble
//! decoding and the training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod net;
pub mod objectives;
pub mod train;

pub use checkpoint::{build_model, load_ensemble, Checkpoint, CheckpointMeta};
pub use config::{ModelConfig, Variant, VariantName};
pub use data::{Dataset, VocabConfig, Vocabularies};
pub use decode::{caption, caption_features, CropAveraging, DecodeSettings, LoadedModel};
pub use error::{ModelError, Result};
pub use net::CaptionNet;
pub use train::{train, Profile, TrainConfig, TrainOutcome};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
