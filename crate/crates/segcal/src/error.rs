use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor math, model evaluation, and the experiment
/// pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: left={left:?}, right={right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("invalid argument for {what}: {reason}")]
    InvalidArgument { what: &'static str, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty {what}: {reason}")]
    EmptySet { what: &'static str, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("optimizer produced a non-finite parameter in layer {layer}")]
    NonFiniteUpdate { layer: String },

    #[error("training aborted at epoch {epoch}, step {step}: {reason}")]
    TrainingAborted { epoch: usize, step: usize, reason: String },

    #[error("tensor file error: {0}")]
    Format(#[from] FormatError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

/// Decode errors for the SGT1 tensor file format. Each malformed-input class
/// gets its own variant so callers (and fuzzers) can tell them apart.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"SGT1\"")]
    BadMagic { found: [u8; 4] },

    #[error("unknown dtype code {code}")]
    UnknownDtype { code: u8 },

    #[error("truncated input: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },

    #[error("trailing bytes after payload: {extra} extra")]
    TrailingBytes { extra: usize },

    #[error("rank must be at least 1")]
    ZeroRank,

    #[error("extent {extent} on axis {axis} is invalid (must be >= 1)")]
    BadExtent { axis: usize, extent: u32 },

    #[error("element count overflows usize")]
    ElementCountOverflow,

    #[error("value {value} at index {index} cannot be stored as {dtype}")]
    ValueNotRepresentable {
        index: usize,
        value: f64,
        dtype: &'static str,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable kind tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidShape { .. } => "invalid_shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptySet { .. } => "empty_set",
            Error::Unsupported(_) => "unsupported",
            Error::NonFiniteUpdate { .. } => "non_finite_update",
            Error::TrainingAborted { .. } => "training_aborted",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Config(_) => "config",
        }
    }
}
