use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: schema error: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: duplicate file_name {file_name}")]
    Duplicate { path: PathBuf, file_name: String },
    #[error("ingest error for {file_name}: {message}")]
    Ingest { file_name: String, message: String },
    #[error("stale feature cache at {path}: manifest hash {found}, expected {expected}")]
    StaleCache {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("length error: {0}")]
    Length(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing references for: {0:?}")]
    MissingReferences(Vec<String>),
    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
