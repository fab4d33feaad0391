//! Reference solutions of the Fokker-Planck equation and weak residuals.

mod solver;
mod weak;

pub use solver::{
    fd_solve, ou_analytic, FdOptions, FdSolution, TimeScheme, TOL_MASS_EXPLICIT, TOL_MASS_IMPLICIT,
};
pub use weak::{
    neumann_dictionary, weak_residual, weak_residual_max, DensityPath, TestFunction, TimeProfile,
};
