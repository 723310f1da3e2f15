use std::path::PathBuf;

/// Errors raised across the search, training, evaluation and reporting code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or enumerant.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke a documented shape or value contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Input data that cannot be processed as given (e.g. unpadded images).
    #[error("input error: {0}")]
    Input(String),
    /// A loss term became NaN or infinite during optimisation.
    #[error("non-finite {term} loss for network {network} (value {value})")]
    NonFinite {
        term: &'static str,
        network: usize,
        value: f64,
    },
    /// Statistical routine received data with no usable variation.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed on-disk artefact (checkpoint, genotype, csv).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
