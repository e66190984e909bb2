use thiserror::Error;

pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: non-finite value at ({row}, {col})")]
    NonFinite {
        op: &'static str,
        row: usize,
        col: usize,
    },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("class `{class}` maps to token `{token}` which is not in the embedding vocabulary")]
    MissingToken { class: String, token: String },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("duplicate class `{0}`")]
    DuplicateClass(String),
    #[error("class `{0}` is both base and novel")]
    OverlappingPartition(String),
    #[error("operation `{op}` requires head mode {expected}, found {found}")]
    WrongMode {
        op: &'static str,
        expected: &'static str,
        found: String,
    },
    #[error("class `{class}` needs {needed} records but only {available} are available")]
    InsufficientRecords {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("unknown synset `{0}`")]
    UnknownSynset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run with seed {seed}, k {k}: {source}")]
    Run {
        seed: u64,
        k: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
