//! Front ends, sampling, search and scoring for multi-task audio captioning.

pub mod audio;
pub mod beam;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod sampler;
pub mod synth;
pub mod text;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
