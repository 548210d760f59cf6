use thiserror::Error;

pub type Result<T, E = DarlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DarlError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("replay buffer underfull: size {size} < batch {batch}")]
    Underfull { size: usize, batch: usize },

    #[error("label {label} out of range for {n_domains} domains")]
    LabelOutOfRange { label: usize, n_domains: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite {loss} at step {step}")]
    NonFinite { loss: &'static str, step: u64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl DarlError {
    /// Stable short identifier used in the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            DarlError::Dimension { .. } => "dimension",
            DarlError::Contract(_) => "contract",
            DarlError::Config(_) => "config",
            DarlError::Underfull { .. } => "underfull",
            DarlError::LabelOutOfRange { .. } => "label_out_of_range",
            DarlError::InsufficientData(_) => "insufficient_data",
            DarlError::NonFinite { .. } => "non_finite",
            DarlError::Format(_) => "format",
            DarlError::Io(_) => "io",
            DarlError::Json(_) => "json",
            DarlError::Csv(_) => "csv",
            DarlError::Image(_) => "image",
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        DarlError::Dimension { op, detail: detail.into() }
    }
}
