use std::path::PathBuf;

/// Every failure the library can report.
///
/// Variants map onto the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {detail}")]
    BadShape { op: &'static str, detail: String },
    #[error("softmax row {row} has every entry forbidden")]
    AllMaskedRow { row: usize },
    #[error("backward called on a tape that was not recording")]
    NoTape,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("no gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid bounding box ({x0}, {y0}, {x1}, {y1})")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("raster mask for frame {0} is empty")]
    EmptyMask(usize),
    #[error("caption has {len} tokens, the cap is {cap}")]
    CaptionTooLong { len: usize, cap: usize },
    #[error("caption is empty")]
    EmptyCaption,
    #[error("reference frame {frame} out of range for {frames} frames")]
    BadRefFrame { frame: usize, frames: usize },
    #[error("bad schedule range: {0}")]
    BadRange(String),
    #[error("timestep {t} outside [1, {max}]")]
    BadTimestep { t: usize, max: usize },
    #[error("bad sampling spec: {0}")]
    BadSpec(String),
    #[error("stage 2 needs a stage-1 checkpoint (looked for {0})")]
    MissingStage1Checkpoint(PathBuf),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("record {0} is missing a score")]
    MissingScore(String),
    #[error("no subject found in latent")]
    NoSubject,
    #[error("k-means needs at least k points (n = {n}, k = {k})")]
    TooFewPoints { n: usize, k: usize },
    #[error("frame is missing generator metadata")]
    MissingMetadata,
    #[error("video ids appear in both train and bench splits: {0:?}")]
    SplitLeak(Vec<String>),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("similarity matrix is not square ({rows} x {cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("need at least two frames, got {0}")]
    TooFewFrames(usize),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("external client error: {0}")]
    External(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for this error: 3 for validation failures, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AllMaskedRow { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFinite(_)
            | Error::NonDeterministicFunction { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
