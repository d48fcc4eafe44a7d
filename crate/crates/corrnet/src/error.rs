use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("data error: {0}")]
    DataError(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("eigenvalue spectrum is degenerate (tied eigenvalues); kernel undefined")]
    DegenerateSpectrum,
    #[error("moment undefined: {0}")]
    MomentUndefined(String),
    #[error("no calibration table available for dimension {0}; run `corrnet calibrate --dim {0}`")]
    CalibrationRequired(usize),
    #[error("target variance {target} is unreachable: the shrinkage family has variance floor {floor}")]
    UnreachableVariance { target: f64, floor: f64 },
    #[error("target mean is unreachable: implied hyper-correlation {implied} lies outside (-1, 1)")]
    UnreachableMean { implied: f64 },
    #[error(
        "sample variance {observed} for component {component} is below the reachable floor \
         {floor}; rescale the data before fitting"
    )]
    RescaleRequired {
        component: usize,
        observed: f64,
        floor: f64,
    },
    #[error("calibration failed: {0}")]
    CalibrationError(String),
    #[error("parse error at row {row}, column {col}: {message}")]
    ParseError {
        row: usize,
        col: usize,
        message: String,
    },
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("pipeline stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 = config error, 3 = data error,
    /// 4 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DomainError(_)
            | Error::InvalidInput(_)
            | Error::ConfigError(_)
            | Error::MomentUndefined(_)
            | Error::CalibrationRequired(_)
            | Error::UnreachableVariance { .. }
            | Error::UnreachableMean { .. } => 2,
            Error::DataError(_)
            | Error::ParseError { .. }
            | Error::RescaleRequired { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
            Error::InvalidCovariance(_)
            | Error::NotPositiveDefinite
            | Error::DegenerateSpectrum
            | Error::CalibrationError(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
