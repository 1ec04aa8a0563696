use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // IDX ingest
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("label byte {value} at index {index} is out of range 0..=9")]
    LabelOutOfRange { index: usize, value: u8 },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    // datasets and training
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid layer widths {0:?}: need at least [in, 1] with a single output")]
    BadWidths(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged at step {step}: {detail}")]
    DivergedLoss { step: usize, detail: String },
    #[error("group (y={y}, z={z}) is empty; cannot build a spurious-free subset")]
    EmptyGroup { y: u8, z: u8 },
    #[error("too few points for clustering: {points} points, k = {k}")]
    TooFewPoints { points: usize, k: usize },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("every cluster is class-tied; no minority cases to build environments from")]
    NoMinorities,
    #[error("IRM needs at least two environments, got {0}")]
    TooFewEnvironments(usize),
    #[error("run reports disagree on the p_e grid for method {0}")]
    GridMismatch(String),
    #[error("nothing to report: the aggregate is empty")]
    EmptyReport,

    // artifacts
    #[error("wrong artifact kind: expected {expected:?}, found {found:?}")]
    WrongKind { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 config error, 3 data error, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Config(_) | Error::BadWidths(_) | Error::TooFewEnvironments(_) => 2,
            Error::DivergedLoss { .. } => 4,
            _ => 3,
        }
    }
}
