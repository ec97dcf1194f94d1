use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unbound variable `{0}`")]
    UnboundVariable(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("log-sum-exp over a vector whose entries are all -inf")]
    DegenerateLogSumExp,

    #[error("gradient requested of a non-scalar output with shape {0}x{1}")]
    NonScalarOutput(usize, usize),

    #[error("variable `{0}` is not on this tape")]
    NotOnTape(String),

    #[error("inner step is not differentiable: {0}")]
    NonDifferentiable(String),

    #[error("all importance log-weights are non-finite")]
    DegenerateWeights,

    #[error("non-finite {what} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::UnboundVariable(_) => "unbound-variable",
            Error::NonFinite(_) => "non-finite",
            Error::DegenerateLogSumExp => "degenerate-logsumexp",
            Error::NonScalarOutput(..) => "non-scalar-output",
            Error::NotOnTape(_) => "not-on-tape",
            Error::NonDifferentiable(_) => "non-differentiable",
            Error::DegenerateWeights => "degenerate-weights",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
