use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] audiocap_core::Error),
    #[error(transparent)]
    Nn(#[from] audiocap_nn::NnError),
    #[error("non-finite loss at step {step}: {breakdown}{}", dump.as_ref().map(|p| format!(" (diagnostics in {})", p.display())).unwrap_or_default())]
    NonFinite {
        step: u64,
        breakdown: String,
        dump: Option<PathBuf>,
    },
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<serde_json::Error> for ModelError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
