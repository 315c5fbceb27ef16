use thiserror::Error;

/// Crate-wide error type. Shape violations inside tape ops are programming
/// errors and panic with the op name and shapes; everything a caller can
/// plausibly recover from (I/O, parsing, config, checkpoint, training
/// divergence) comes through here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("model input must have shape [n, 1, {expected}], got {got:?}")]
    InputLen { expected: usize, got: Vec<usize> },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("record {subject}: {msg}")]
    Record { subject: String, msg: String },

    #[error("window [{t0}, {t0_end}) not covered: {msg}")]
    WindowNotCovered { t0: f64, t0_end: f64, msg: String },

    #[error("non-finite gradient in parameter '{name}'")]
    NonFiniteGrad { name: String },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
