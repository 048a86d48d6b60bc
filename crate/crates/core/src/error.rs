use thiserror::Error;

/// Every failure the library can report.
///
/// [`HteError::kind`] yields a stable kebab-case tag which the CLI and the
/// C ABI surface to callers.
#[derive(Debug, Error)]
pub enum HteError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {field} at index {index}")]
    NonFiniteValue { field: &'static str, index: usize },
    #[error("treatment must be 0/1, found {value} at row {row}")]
    InvalidTreatment { row: usize, value: f64 },
    #[error("degenerate arm: need at least one treated and one control unit (treated={treated}, control={control})")]
    DegenerateArm { treated: usize, control: usize },
    #[error("arm too small: {arm} arm has {got} rows, need {needed}")]
    ArmTooSmall { arm: &'static str, got: usize, needed: usize },
    #[error("insufficient samples: need {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("root is degenerate: the data routed to the tree are single-armed")]
    RootDegenerate,
    #[error("propensity score out of (0,1): {value} at index {index}")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("no stratum contains both arms")]
    NoValidStratum,
    #[error("root node not viable: no stratum has at least {min_per_arm} units in each arm")]
    RootNotViable { min_per_arm: usize },
    #[error("no viable stratum: no stratum has at least {min_per_arm} units in each arm")]
    NoViableStratum { min_per_arm: usize },
    #[error("k={k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("fold too small: {0}")]
    FoldTooSmall(String),
    #[error("stratified model requires a stratum")]
    MissingStratum,
    #[error("need at least {needed} features, got {p}")]
    PTooSmall { p: usize, needed: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("missing column: {0}")]
    MissingColumn(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("unsupported format_version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("unknown method: {0}")]
    UnknownMethod(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HteError {
    pub fn kind(&self) -> &'static str {
        match self {
            HteError::DimensionMismatch(_) => "dimension-mismatch",
            HteError::NonFiniteValue { .. } => "non-finite-value",
            HteError::InvalidTreatment { .. } => "invalid-treatment",
            HteError::DegenerateArm { .. } => "degenerate-arm",
            HteError::ArmTooSmall { .. } => "arm-too-small",
            HteError::InsufficientSamples { .. } => "insufficient-samples",
            HteError::SingleClass => "single-class",
            HteError::RootDegenerate => "root-degenerate",
            HteError::ScoreOutOfRange { .. } => "score-out-of-range",
            HteError::NoValidStratum => "no-valid-stratum",
            HteError::RootNotViable { .. } => "root-not-viable",
            HteError::NoViableStratum { .. } => "no-viable-stratum",
            HteError::KOutOfRange { .. } => "k-out-of-range",
            HteError::EmptyValidationSet => "empty-validation-set",
            HteError::FoldTooSmall(_) => "fold-too-small",
            HteError::MissingStratum => "missing-stratum",
            HteError::PTooSmall { .. } => "p-too-small",
            HteError::LengthMismatch { .. } => "length-mismatch",
            HteError::InvalidParameter(_) => "invalid-parameter",
            HteError::MissingColumn(_) => "missing-column",
            HteError::Parse { .. } => "parse-error",
            HteError::EmptyInput(_) => "empty-input",
            HteError::VersionMismatch { .. } => "version-mismatch",
            HteError::MalformedDocument(_) => "malformed-document",
            HteError::UnknownMethod(_) => "unknown-method",
            HteError::Unsupported(_) => "unsupported",
            HteError::Io(_) => "io-error",
        }
    }
}

pub type Result<T> = std::result::Result<T, HteError>;
