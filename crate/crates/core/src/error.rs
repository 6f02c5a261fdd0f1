use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("architecture/activation mismatch: {0}")]
    ArchMismatch(String),
    #[error("unsupported derivative order {0} (max 2)")]
    UnsupportedOrder(usize),
    #[error("activation is constant; it has no nonzero Hermite mode")]
    NoHermiteMode,
    #[error("polynomial degree {degree} exceeds cap {cap}")]
    DegreeCap { degree: usize, cap: usize },
    #[error("non-finite iterate at {0}")]
    Divergence(String),
    #[error("cannot auto-scale learning rates: {0}")]
    CannotAutoscale(String),
    #[error("cannot fit: {0}")]
    CannotFit(String),
    #[error("no accuracy level is reached by any vocabulary size")]
    EmptyThreshold,
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("schema version mismatch: file has {found}, this build reads {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    /// Stable snake-case tag for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ResourceCap(_) => "resource_cap",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::ArchMismatch(_) => "arch_mismatch",
            Error::UnsupportedOrder(_) => "unsupported_order",
            Error::NoHermiteMode => "no_hermite_mode",
            Error::DegreeCap { .. } => "degree_cap",
            Error::Divergence(_) => "divergence",
            Error::CannotAutoscale(_) => "cannot_autoscale",
            Error::CannotFit(_) => "cannot_fit",
            Error::EmptyThreshold => "empty_threshold",
            Error::UnknownKey(_) => "unknown_key",
            Error::SchemaMismatch { .. } => "schema_mismatch",
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
