use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("kernel extent {kernel:?} exceeds input extent {input:?}")]
    KernelTooLarge {
        kernel: Vec<usize>,
        input: Vec<usize>,
    },

    #[error("pooling window {window:?} exceeds input extent {input:?}")]
    WindowTooLarge {
        window: Vec<usize>,
        input: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("constant input: threshold undefined when max equals min")]
    ConstantInput,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no object markers available for learning")]
    NoObjectMarkers,

    #[error("every learned centroid has zero norm")]
    AllCentroidsZero,

    #[error("no filter carries a good_WT or good_ET label")]
    NoLabeledFilters,

    #[error("selection budget of {budget} images exhausted")]
    BudgetExhausted { budget: usize },

    #[error("scores are stale; re-score before ranking")]
    StaleScores,

    #[error("score table has no remaining images")]
    EmptyTable,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("forward cache is stale (cache generation {cache}, decoder generation {decoder})")]
    StaleCache { cache: u64, decoder: u64 },

    #[error("unknown case {0:?}")]
    UnknownCase(String),

    #[error("unknown filter {0:?}")]
    UnknownFilter(String),

    #[error("case {0:?} has no ground truth")]
    MissingGroundTruth(String),

    #[error("{0}")]
    NotReady(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: {0}")]
    BadMagic(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("unsupported data type: {0}")]
    UnsupportedDtype(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
