use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is rank deficient (smallest/largest singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("inverse retraction undefined: operator-norm distance {distance} is not below 1")]
    NotInDomain { distance: f64 },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid noise level {0}")]
    InvalidSigma(f64),

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("Hessian is not positive definite (smallest eigenvalue {lambda_min})")]
    HessianNotPd { lambda_min: f64 },

    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),

    #[error("sample too small: {0} values")]
    SampleTooSmall(usize),

    #[error("log-log fit is degenerate: {0}")]
    DegenerateFit(String),

    #[error("no rows selected for statistic `{0}`")]
    EmptySelection(String),

    #[error("not an orthogonal matrix (||Q^T Q - I||_F = {deviation:e})")]
    NotOrthogonal { deviation: f64 },

    #[error("matrix has non-finite entries")]
    NonFinite,

    #[error("malformed input: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Short tag used in result tables.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NotInDomain { .. } => "not_in_domain",
            Error::InvalidDims(_) => "invalid_dims",
            Error::InvalidSigma(_) => "invalid_sigma",
            Error::NoConvergence { .. } => "no_convergence",
            Error::HessianNotPd { .. } => "hessian_not_pd",
            Error::InvalidProbability(_) => "invalid_probability",
            Error::SampleTooSmall(_) => "sample_too_small",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::EmptySelection(_) => "empty_selection",
            Error::NotOrthogonal { .. } => "not_orthogonal",
            Error::NonFinite => "non_finite",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
