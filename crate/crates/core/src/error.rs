use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need finite corners with x2 > x1 and y2 > y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("degenerate embedding: vector has zero or non-finite norm")]
    DegenerateEmbedding,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty category name")]
    EmptyName,

    #[error("duplicate category name {0:?}")]
    DuplicateName(String),

    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("wildcard teacher absent: the object wildcard must be tuned before the unknown wildcard")]
    WildcardTeacherAbsent,

    #[error("label references category {id} which is {reason}")]
    FrozenOrAbsentCategory { id: usize, reason: &'static str },

    #[error("category {0} has no task tag (previously known, currently known or unknown)")]
    UntaggedCategory(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible world: {0}")]
    InfeasibleWorld(String),

    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: &'static str },

    #[error("unsupported {what} version {found} (expected {expected})")]
    VersionMismatch { what: &'static str, found: u32, expected: u32 },

    #[error("truncated {0} file")]
    Truncated(&'static str),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed {what} at line {line}: {message}")]
    Malformed { what: &'static str, line: usize, message: String },

    #[error("feature dimension mismatch: scene file declares {declared}, feature file has {found}")]
    FeatureDimMismatch { declared: usize, found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
