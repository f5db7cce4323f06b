use thiserror::Error;

/// Errors raised by the numerical modules.
///
/// Variants are grouped by the module that produces them; [`Error::kind`]
/// maps each onto the coarse validation/numerical split used for exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // structure validation
    #[error("block dimensions must be non-increasing: m_{index} = {current} exceeds m_{prev_index} = {previous}", prev_index = .index - 1)]
    MonotonicityViolation {
        index: usize,
        current: usize,
        previous: usize,
    },
    #[error("block B_{index} is rank deficient: sigma_min = {sigma_min:e}, sigma_max = {sigma_max:e}")]
    RankDeficient {
        index: usize,
        sigma_min: f64,
        sigma_max: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite entry in {0}")]
    NonFinite(String),
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("dilation scale must be positive, got {0}")]
    NonPositiveScale(f64),

    // kernel
    #[error("covariance C(1) is not positive definite")]
    SingularCovariance,
    #[error("quadrature error estimate {estimate:e} exceeds tolerance {tolerance:e}")]
    GridTooCoarse { estimate: f64, tolerance: f64 },
    #[error("exponent p = {0} must be at least 1")]
    InvalidExponent(f64),

    // convolution / embeddings
    #[error("incompatible grids: {0}")]
    IncompatibleGrids(String),
    #[error("Young exponents violate 1/p + 1/q = 1/r + 1 (p = {p}, q = {q}, r = {r})")]
    ExponentMismatch { p: f64, q: f64, r: f64 },
    #[error("exponent out of range: {0}")]
    ExponentOutOfRange(String),

    // sde
    #[error("covariance factorization failed: {0}")]
    FactorizationFailure(String),

    // fd solver
    #[error("point is not on the kinetic boundary V x dU")]
    NotOnKBoundary,
    #[error("CFL violation: dt * transport rate = {rate} exceeds {limit}")]
    CflViolation { rate: f64, limit: f64 },
    #[error("ellipticity audit failed at x = {x:?}, t = {t}: {reason}")]
    EllipticityViolation { x: Vec<f64>, t: f64, reason: String },
    #[error("maximum principle hypothesis violated: {0}")]
    HypothesisViolation(String),
    #[error("invalid problem setup: {0}")]
    InvalidProblem(String),
    #[error("linear solver did not converge after {iterations} iterations (residual {residual:e})")]
    SolverDivergence { iterations: usize, residual: f64 },

    // expressions
    #[error("expression parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    // de giorgi
    #[error("truncation requires l > k (k = {k}, l = {l})")]
    InvalidTruncation { k: f64, l: f64 },
    #[error("eps0 = {eps0} must lie in (0, p0 - 1] = (0, {max}]")]
    Eps0OutOfRange { eps0: f64, max: f64 },
    #[error("invalid q': {0}")]
    InvalidQPrime(String),
    #[error("q~ = {q_tilde} must exceed q0 = {q0}")]
    QTildeTooSmall { q_tilde: f64, q0: f64 },
    #[error("bad iteration parameters: {0}")]
    BadParameters(String),
    #[error("level iteration stalled: {0}")]
    ScheduleStall(String),

    // io
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

/// Coarse classification used by the CLI exit-code contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            SingularCovariance
            | GridTooCoarse { .. }
            | FactorizationFailure(_)
            | SolverDivergence { .. }
            | ScheduleStall(_)
            | Io(_) => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
