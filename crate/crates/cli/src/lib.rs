//! Command-line pipeline: ingest, build-vocab, featurize, train, sweep, caption, evaluate.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use error::{CliError, Result};
