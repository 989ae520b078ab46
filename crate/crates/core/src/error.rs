use thiserror::Error;

/// Errors raised anywhere in the simulation stack.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is singular (pivot {pivot:e} below threshold {threshold:e})")]
    SingularMatrix { pivot: f64, threshold: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("leader state matrix is not Hurwitz")]
    NotHurwitz,

    #[error("topology is unbalanced: agent {agent} incoming weights sum to {sum}")]
    UnbalancedTopology { agent: usize, sum: f64 },

    #[error("history query at t={query} is past the latest sample t={latest}")]
    FutureQuery { query: f64, latest: f64 },

    #[error("history query at t={query} predates the retained window starting at t={oldest}")]
    ExpiredQuery { query: f64, oldest: f64 },

    #[error("state became non-finite")]
    NonFiniteState,

    #[error("no matching gains for agent {agent}: residual {residual:e}")]
    NoMatchingSolution { agent: usize, residual: f64 },

    #[error("Lyapunov weight is singular for agent {agent} (|theta_r*| = {value:e})")]
    SingularWeight { agent: usize, value: f64 },

    #[error("divergence detected: |x|_inf = {norm:e}")]
    DivergenceDetected { norm: f64 },

    #[error("trace is empty")]
    EmptyTrace,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid scenario: {0}")]
    Validation(String),

    #[error("at t={time}: {source}")]
    AtTime {
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn at(self, time: f64) -> Self {
        match self {
            e @ Error::AtTime { .. } => e,
            other => Error::AtTime {
                time,
                source: Box::new(other),
            },
        }
    }

    /// Strips any timestamp wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTime { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
