//! Causal mediation analysis for compositional count data.
//!
//! The mediator is a vector of counts over `J+1` parts. A sequential binary
//! partition fixes an orthonormal ilr basis, linear models are fitted per
//! confounder stratum, and direct, overall indirect and coordinate-wise
//! indirect effects are pooled with delta-method standard errors.
//! [`simgen`] and [`experiment`] provide the hierarchical count simulator
//! and the replication harness.

pub mod coda;
pub mod experiment;
pub mod io;
pub mod mediation;
pub mod regress;
pub mod rng;
pub mod simgen;

pub use coda::{
    basis_from_sbp, basis_rotation, close_counts, ilr_forward, ilr_inverse, pivotal_sbp,
    validate_sbp, CodaError, Composition, ContrastBasis, IlrVector, SbpMatrix,
};
pub use mediation::{
    mediate, CohortData, Effect, MediationError, MediationEstimate, MediationOptions, Pooling,
};
pub use regress::{mv_ols_fit, ols_fit, DesignMatrix, RegressError};
