//! Minimizing-movement (JKO) schemes with general transport costs.
//!
//! The crate discretizes probability densities on tensor-product grids and
//! advances them by the proximal recursion
//!
//! ```text
//! rho_{k+1} = argmin  beta^{-1} E(rho) + D(rho) + T_c(rho, rho_k) / tau
//! ```
//!
//! where `T_c` is the optimal transport cost for a cost function `c` whose
//! mixed Hessian induces a Riemannian metric. Bregman divergences of convex
//! potentials are the main example: they induce the Hessian metric `D^2 phi`
//! while staying cheap to evaluate.
//!
//! Modules:
//! - [`geometry`]: costs, convex potentials, induced metrics and c-segments.
//! - [`measures`]: grids, densities and the entropy/drift/moment functionals.
//! - [`transport`]: exact and entropic optimal transport, Bregman reduction.
//! - [`jko`]: the proximal step, the flow runner and its diagnostics.
//! - [`fokker_planck`]: finite-volume reference solver and weak residuals.

pub mod error;
pub mod fokker_planck;
pub mod geometry;
pub mod jko;
pub mod linalg;
pub mod measures;
pub mod transport;

pub use error::{Error, Result};
pub use geometry::{
    bregman_cost, dirichlet_log_cost, gaussian_log_partition_potential, mahalanobis_cost,
    quadratic_cost, ConvexPotential, CostFunction, MetricModel,
};
pub use jko::{FlowTrajectory, JkoConfig};
pub use measures::{DiscreteDensity, DiscreteDomain, DriftPotential};
pub use transport::{CostMatrix, TransportPlan};
