use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in batch element {index}")]
    NonFinite { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class {class} has {count} samples, at least {needed} required")]
    InsufficientSamples { class: u32, count: usize, needed: usize },
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{metric} needs both classes; missing {missing} samples")]
    SingleClass { metric: &'static str, missing: &'static str },
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("config mismatch on field `{field}`: {detail}")]
    ConfigMismatch { field: String, detail: String },
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::UnknownClass(_) => "unknown_class",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::SingleClass { .. } => "single_class",
            Error::Config(_) => "config",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
