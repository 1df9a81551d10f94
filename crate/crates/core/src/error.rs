use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlumError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate denominator: |{value:e}| < {eps:e}")]
    DegenerateDenominator { value: f64, eps: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("spatial map has {0} elements; at least 2 are required")]
    DegenerateSpatialDims(usize),

    #[error("batch has {0} samples; at least 2 are required")]
    DegenerateBatch(usize),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("numerical divergence at epoch {epoch}, step {step}: {detail}")]
    NumericalDivergence { epoch: usize, step: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AlumError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AlumError::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        AlumError::Contract(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AlumError::Config(_) => 2,
            AlumError::NumericalDivergence { .. } => 3,
            AlumError::Io(_) | AlumError::Csv(_) | AlumError::Format(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, AlumError>;
