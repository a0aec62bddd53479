use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("attention row {row} has no visible key")]
    DegenerateMask { row: usize },
    #[error("non-positive discretization step {0}")]
    InvalidStep(f64),
    #[error("sequence of length {len} is too short for {levels} pyramid levels")]
    SequenceTooShort { len: usize, levels: usize },
    #[error("raw outputs were produced on different grids: {0}")]
    GridMismatch(String),
    #[error("ground truth database is empty")]
    EmptyGroundTruth,

    #[error("video {0:?} not found")]
    NotFound(String),
    #[error("feature file {path}: expected {expected} bytes, found {found}")]
    CorruptFeatureFile { path: PathBuf, expected: usize, found: usize },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("video {video}: segment [{start}, {end}] is empty after clipping")]
    InvalidSegment { video: String, start: f64, end: f64 },
    #[error("video {video}: annotation has unknown label {label:?}")]
    UnknownLabel { video: String, label: String },
    #[error("could not place {actions} actions in video {video} without overlap")]
    PlacementFailure { video: String, actions: usize },

    #[error("non-finite gradient produced by {op}")]
    GradientOverflow { op: &'static str },
    #[error("training diverged at step {step}: loss {loss}")]
    DivergedAtStep { step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}
