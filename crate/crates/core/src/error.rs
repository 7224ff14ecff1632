use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A final-layer class template has zero norm, so cosine similarity is undefined.
    #[error("degenerate class template for class {class}")]
    DegenerateTemplate { class: usize },

    #[error("synthesis diverged at step {step}: loss = {loss}")]
    SynthesisDivergence { step: usize, loss: f64 },

    #[error("class impression for class {class} did not reach confidence {threshold:.4} within {iterations} iterations (last {last:.4})")]
    NonConvergence {
        class: usize,
        threshold: f64,
        iterations: usize,
        last: f64,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    TrainingDivergence { epoch: usize, batch: usize, loss: f64 },

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised because a numerical procedure blew up.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::SynthesisDivergence { .. }
                | Error::TrainingDivergence { .. }
                | Error::NonConvergence { .. }
        )
    }
}

/// Errors from decoding one of the binary containers (checkpoints, transfer
/// sets, IDX files).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("item count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed content: {0}")]
    Malformed(String),
}
