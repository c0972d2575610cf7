use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular (pivot magnitude {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("demixing system singular at frequency bin {bin}, source {source_index} even after ridge recovery")]
    SingularSystem { bin: usize, source_index: usize },

    #[error("signal of {len} samples is shorter than the {window}-sample analysis window")]
    SignalTooShort { len: usize, window: usize },

    #[error("source {source_index} has vanishing power ({eta:e}); cannot normalize")]
    DegenerateSource { source_index: usize, eta: f64 },

    #[error("reference signal is all zeros")]
    ZeroReference,

    #[error("projection normal equations are ill-conditioned (taps = {taps})")]
    IllConditionedProjection { taps: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),

    #[error("I/O failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed scene file: {0}")]
    Scene(#[from] serde_json::Error),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("frequency bin {bin}: {source}")]
    AtBin {
        bin: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration { iteration, source: Box::new(self) }
    }

    pub(crate) fn at_bin(self, bin: usize) -> Self {
        Error::AtBin { bin, source: Box::new(self) }
    }
}
