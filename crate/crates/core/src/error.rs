use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("limit exceeded: {0}")]
    LimitExceeded(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("degenerate component: {0}")]
    DegenerateComponent(String),
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("rank-deficient basis: {0}")]
    RankDeficientBasis(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numerical failures, as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem(_)
                | Error::DegenerateComponent(_)
                | Error::NotPsd(_)
                | Error::RankDeficientBasis(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse(_) => "ParseError",
            Error::InvalidMesh(_) => "InvalidMesh",
            Error::LimitExceeded(_) => "LimitExceeded",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::SingularSystem(_) => "SingularSystem",
            Error::DegenerateComponent(_) => "DegenerateComponent",
            Error::NotPsd(_) => "NotPSD",
            Error::NotSymmetric(_) => "NotSymmetric",
            Error::RankDeficientBasis(_) => "RankDeficientBasis",
            Error::IndexOutOfRange(_) => "IndexOutOfRange",
            Error::InsufficientSamples(_) => "InsufficientSamples",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
