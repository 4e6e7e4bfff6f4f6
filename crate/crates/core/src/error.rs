use thiserror::Error;

/// Every failure the engine can report. Each variant maps to a stable
/// machine-readable code via [`Error::code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("index {index} out of range (limit {limit}) in {context}")]
    OutOfRange {
        context: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("layer {layer} outside valid range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("hidden state is at layer {got}, expected {expected}")]
    LayerMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("operation requires {expected} modality")]
    Modality { expected: &'static str },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("optimization diverged at iteration {iteration}")]
    Optimization { iteration: usize },

    #[error("all {0} samples were excluded (original score <= threshold)")]
    AllExcluded(usize),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported bundle version {0}")]
    Version(u32),

    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),

    #[error("truncated bundle: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),

    #[error("unsupported dtype code {0}")]
    Dtype(u8),

    #[error("entry name is not valid UTF-8")]
    InvalidName,

    #[error("missing weight {0:?}")]
    MissingWeight(String),

    #[error("weight {name:?} has shape {got:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Degenerate(_) => "degenerate_input",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Config(_) => "invalid_config",
            Error::LayerOutOfRange { .. } => "layer_out_of_range",
            Error::LayerMismatch { .. } => "layer_mismatch",
            Error::Empty(_) => "empty_input",
            Error::Modality { .. } => "wrong_modality",
            Error::Distribution(_) => "invalid_distribution",
            Error::NonPositiveVariance(_) => "non_positive_variance",
            Error::Parameter(_) => "invalid_parameter",
            Error::Optimization { .. } => "optimization_diverged",
            Error::AllExcluded(_) => "all_samples_excluded",
            Error::BadMagic(_) => "bad_magic",
            Error::Version(_) => "version_mismatch",
            Error::DuplicateName(_) => "duplicate_name",
            Error::Truncated { .. } => "truncated_payload",
            Error::TrailingBytes(_) => "trailing_bytes",
            Error::Dtype(_) => "unsupported_dtype",
            Error::InvalidName => "invalid_name",
            Error::MissingWeight(_) => "missing_weight",
            Error::WeightShape { .. } => "weight_shape_mismatch",
            Error::UnknownMethod(_) => "unknown_method",
            Error::Manifest(_) => "manifest_error",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
