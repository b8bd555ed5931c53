use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("target is infeasible: needs {needed} frames, lattice has {available}")]
    InfeasibleTarget { needed: usize, available: usize },

    #[error("unknown character {0:?}")]
    UnknownChar(char),

    #[error("no glyph for character {0:?}")]
    MissingGlyph(char),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("fingerprint mismatch: checkpoint was written for a different model config")]
    Fingerprint,

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training step failed: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::InfeasibleTarget { .. } => "infeasible_target",
            Error::UnknownChar(_) => "unknown_char",
            Error::MissingGlyph(_) => "missing_glyph",
            Error::Checkpoint(_) => "checkpoint",
            Error::Fingerprint => "fingerprint",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Training(_) => "training",
        }
    }
}
