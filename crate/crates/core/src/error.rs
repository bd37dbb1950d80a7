use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("moment not certifiable: {0}")]
    MomentNotCertifiable(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("mask undefined for periodic domains")]
    MaskUndefinedForPeriodic,

    #[error("off-lattice shift: {0}")]
    OffLatticeShift(String),

    #[error("incommensurate grid: h = {h} does not divide eps = {eps}")]
    IncommensurateGrid { h: f64, eps: f64 },

    #[error("interaction range exceeds domain: eps * support = {range} >= {extent}")]
    InteractionRangeExceedsDomain { range: f64, extent: f64 },

    #[error("density must be positive")]
    DensityMustBePositive,

    #[error("density not differentiable")]
    NotDifferentiable,

    #[error("solver requires convexity")]
    RequiresConvexity,

    #[error("closed form requires x-independence")]
    ClosedFormRequiresXIndependence,

    #[error("density is not a quadratic form a(xi)|z|^2 with m = 1")]
    NotQuadratic,

    #[error("ratio undefined for the zero field")]
    RatioUndefined,

    #[error("step size exceeds stability bound (tau = {tau}, bound = {bound})")]
    StepExceedsStability { tau: f64, bound: f64 },

    #[error("flows require p >= 2 (got p = {0})")]
    FlowExponent(f64),

    #[error("non-radial kernel rejected: {0}")]
    NonRadialKernel(String),

    #[error("mismatched domains: {0}")]
    MismatchedDomains(String),

    #[error("unnormalizable density: {0}")]
    Unnormalizable(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
