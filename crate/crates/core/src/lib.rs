//! Time-domain fluorescence diffuse optical tomography in a half-space.
//!
//! * [`model`]: optical parameters, targets, parameter-vector layouts,
//!   acquisition geometry and stacked measurements.
//! * [`forward`]: analytic TPSF of point, cuboid and time-dependent targets
//!   and the measurement operator.
//! * [`peaks`]: peak detection, closed-form peak approximations and the
//!   three-step non-iterative localization.
//! * [`inversion`]: Tikhonov-regularized Gauss–Newton reconstruction with a
//!   finite-difference sensitivity matrix and discrepancy-based α.
//! * [`scenarios`]: built-in reproduction scenarios and their JSON schema.

pub mod error;
pub mod forward;
pub mod inversion;
pub mod model;
pub mod peaks;
pub mod scenarios;

pub use error::{FdotError, Result};
pub use forward::QuadratureSpec;
pub use model::{
    Acquisition, BoundaryPoint, Cuboid, Layout, Measurement, OpticalParams, ParamVector, Poly,
    SdPair, Target, TimeGrid, TimeWindow,
};
