use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("non-3D payload in {path}: dims {dims:?}")]
    Non3dPayload { path: PathBuf, dims: Vec<u16> },
    #[error("cannot write {path}: {source}")]
    Unwritable { path: PathBuf, source: std::io::Error },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("constant volume")]
    ConstantVolume,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("zero-energy reference")]
    ZeroEnergyReference,
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("label {0} out of range 0..=5")]
    LabelOutOfRange(i64),
    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("empty schedule")]
    EmptySchedule,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("subject {0} has no labelmap")]
    MissingLabelmap(String),
    #[error("subject {0} has no paired high-field volumes")]
    MissingPairedData(String),
    #[error("segmentation weights changed while frozen (hash {before} -> {after})")]
    UnfrozenSegmentation { before: String, after: String },
    #[error("coverage gap at slice {0}")]
    CoverageGap(usize),
    #[error("contrast mismatch: {0}")]
    ContrastMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("[{phase}] {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Params(#[from] voxgrad::Error),
}

impl Error {
    pub fn in_phase(self, phase: &str) -> Self {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                phase: phase.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by bad input or configuration rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Phase { source, .. } => source.is_validation(),
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::MissingFile(_)
            | Error::MissingLabelmap(_)
            | Error::MissingPairedData(_)
            | Error::EmptyDataset
            | Error::EmptySchedule
            | Error::ContrastMismatch(_) => true,
            _ => false,
        }
    }
}
