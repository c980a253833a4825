use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("rejection sampler acceptance too low: {accepted} accepted after {proposals} proposals")]
    AcceptanceTooLow { accepted: usize, proposals: u64 },
    #[error("unknown example '{0}'")]
    UnknownExample(String),
    #[error("conditioning event has zero probability")]
    ZeroConditioningMass,
    #[error("labels are all identical")]
    DegenerateLabels,
    #[error("Hessian is singular at iteration {0}")]
    SingularHessian(usize),
    #[error("could not build folds containing both classes after {0} attempts")]
    FoldDegenerate(usize),
    #[error("propensity scores required for strategy {0}")]
    MissingPropensity(String),
    #[error("treatment arm {0} is empty")]
    EmptyArm(u8),
    #[error("dataset has no oracle U columns")]
    MissingOracleU,
    #[error("AUC ratio denominator is degenerate ({0:e})")]
    DegenerateDenominator(f64),
    #[error("density is not finite at a grid point")]
    NonFiniteDensity,
    #[error("no draws fall in the propensity level set around p = {0}")]
    LevelSetEmpty(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown column '{0}'")]
    UnknownColumn(String),
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
