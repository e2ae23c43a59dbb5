use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix contains non-finite values")]
    NonFinite,
    #[error("matrix is not positive definite (pivot {pivot} at index {index}, jitter {jitter})")]
    NotPositiveDefinite { index: usize, pivot: f64, jitter: f64 },
    #[error("matrix is not symmetric (max asymmetry {0})")]
    NotSymmetric(f64),
    #[error("SVD did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("spectrum is identically zero")]
    AllZeroSpectrum,
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("insufficient data: {points} points for {clusters} clusters")]
    InsufficientData { points: usize, clusters: usize },
    #[error("calibration produced no tokens")]
    EmptyCalibration,
    #[error("every token is masked")]
    AllMasked,
    #[error("could not place {clusters} directions with separation {separation} after {attempts} attempts")]
    SeparationInfeasible {
        clusters: usize,
        separation: f64,
        attempts: usize,
    },
    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },
    #[error("insufficient tokens: {0}")]
    InsufficientTokens(String),
    #[error("expert {0} has zero weights")]
    ZeroWeights(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFinite => "NonFinite",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::NotSymmetric(_) => "NotSymmetric",
            Error::NoConvergence(_) => "NoConvergence",
            Error::AllZeroSpectrum => "AllZeroSpectrum",
            Error::DegenerateData(_) => "DegenerateData",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::EmptyCalibration => "EmptyCalibration",
            Error::AllMasked => "AllMasked",
            Error::SeparationInfeasible { .. } => "SeparationInfeasible",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::InsufficientTokens(_) => "InsufficientTokens",
            Error::ZeroWeights(_) => "ZeroWeights",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
