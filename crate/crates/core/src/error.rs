use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("preprocessing error: {0}")]
    Preprocessing(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Index(_) => "index",
            Error::NonFinite(_) => "non_finite",
            Error::Io { .. } => "io",
            Error::Ingestion(_) => "ingestion",
            Error::Preprocessing(_) => "preprocessing",
            Error::Sampling(_) => "sampling",
            Error::Config(_) => "config",
            Error::Probe(_) => "probe",
            Error::Format(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
