use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label {label} outside [0, {max}]")]
    Label { label: usize, max: usize },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("checksum mismatch for {artifact}: expected {expected}, found {found}")]
    Checksum { artifact: String, expected: String, found: String },

    #[error("missing artifact for stage `{stage}`: {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short stable identifier of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::EmptyClass(_) => "empty_class",
            Error::NonFinite(_) => "non_finite",
            Error::Label { .. } => "label",
            Error::Unknown { .. } => "unknown_name",
            Error::Checksum { .. } => "checksum",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Invalid(_) => "invalid",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
