use thiserror::Error;

/// Errors raised by the forward model, the reconstruction engines and the
/// scenario registry.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdotError {
    #[error("invalid optical parameter `{field}`: {reason}")]
    InvalidOptics { field: &'static str, reason: String },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("parameter {index} violates a geometric invariant: {reason}")]
    InvalidParameter { index: usize, reason: String },

    #[error("layout mismatch: expected {expected}, got {found}")]
    LayoutMismatch { expected: String, found: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge after {subdivisions} subdivisions (estimate {estimate:e}, tolerance {tolerance:e})")]
    QuadratureNonConvergence {
        subdivisions: usize,
        estimate: f64,
        tolerance: f64,
    },

    #[error("target geometry leaves the half-space at normalized time u = {u}")]
    GeometryOutsideDomain { u: f64 },

    #[error("peak detection failed: {0}")]
    Peak(String),

    #[error("inconsistent peak data: radicand {radicand:e} is not positive")]
    InconsistentPeak { radicand: f64 },

    #[error("forward evaluation failed while perturbing parameter {index}: {source}")]
    Sensitivity {
        index: usize,
        #[source]
        source: Box<FdotError>,
    },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<FdotError>,
    },

    #[error("linear solve failed: {0}")]
    LinearAlgebra(String),

    #[error("unknown scenario `{id}` (valid ids: {valid})")]
    UnknownScenario { id: String, valid: String },

    #[error("scenario: {0}")]
    Scenario(String),
}

impl FdotError {
    /// Whether the error stems from invalid input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        match self {
            FdotError::InvalidOptics { .. }
            | FdotError::InvalidGeometry(_)
            | FdotError::InvalidParameter { .. }
            | FdotError::LayoutMismatch { .. }
            | FdotError::UnknownScenario { .. }
            | FdotError::Scenario(_)
            | FdotError::Domain(_) => true,
            FdotError::Iteration { source, .. } | FdotError::Sensitivity { source, .. } => {
                source.is_validation()
            }
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, FdotError>;
