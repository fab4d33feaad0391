//! Costs, convex potentials, induced metrics and c-segments.

mod cost;
mod metric;
mod potential;
mod registry;
mod segment;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

pub use cost::{
    bregman_cost, dirichlet_log_cost, mahalanobis_cost, quadratic_cost, BregmanCost, CostFunction,
    DirichletLogCost, MahalanobisCost, QuadraticCost, SIMPLEX_TOL,
};
pub use metric::{
    exponential_map, riemannian_dist_sq, ConstantMetric, DistanceKind, EuclideanMetric,
    HessianMetric, InducedMetric, MetricModel,
};
pub use potential::{
    newton_gradient_inverse, ConvexPotential, GaussianLogPartition, QuadraticPotential,
    SeparablePolynomial,
};
pub use registry::{PotentialFamily, Registry};
pub use segment::{
    c_segment, c_segment_from, c_segment_velocity_check, riemannian_grad_x, MAX_NEWTON_ITERS,
    TOL_NEWTON, TOL_VELOCITY, VELOCITY_STEP,
};

use crate::linalg;
use crate::{Error, Result};

pub const TOL_GEOM: f64 = 1e-8;
pub const TOL_DET: f64 = 1e-12;

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidInput(
                "box bounds must have equal nonzero length".into(),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidInput(format!(
                "empty box {lower:?} .. {upper:?}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| rng.gen_range(*l..*u))
            .collect()
    }
}

/// `g_ij(x) = -c_{x^i, y^j}(x, x)`.
///
/// Fails with [`Error::SingularMetric`] unless the result is symmetric (to
/// `TOL_GEOM` relative) and positive definite.
pub fn induced_metric(cost: &dyn CostFunction, x: &[f64]) -> Result<DMatrix<f64>> {
    let g = -cost.mixed_hessian(x, x)?;
    let scale = g.amax().max(1.0);
    if linalg::max_asymmetry(&g) > 10.0 * TOL_GEOM * scale {
        return Err(Error::SingularMetric {
            min_eigenvalue: linalg::min_eigenvalue(&g),
        });
    }
    let g = (&g + g.transpose()) * 0.5;
    let min = linalg::min_eigenvalue(&g);
    if min <= 0.0 {
        return Err(Error::SingularMetric {
            min_eigenvalue: min,
        });
    }
    Ok(g)
}

/// Hessian in `x` of `c(., y)` at `y = x`, by finite differences of `grad_x`.
/// Equals the induced metric for any cost with a smooth minimum on the diagonal.
pub fn diagonal_x_hessian(cost: &dyn CostFunction, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = cost.dim();
    let y = x.to_vec();
    linalg::fd_jacobian(|z| cost.grad_x(z, &y), x, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum A1Status {
    /// Bregman costs with SPD Hessians: `y -> -grad_x c(x, y) = D phi(y) - D phi(x)`
    /// is injective everywhere.
    GlobalBregman,
    /// Only the local surrogate (nonsingular mixed Hessian) was checked.
    NotVerified,
}

#[derive(Debug, Clone)]
pub struct PairCheck {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub abs_det: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct RegularityReport {
    pub pairs: Vec<PairCheck>,
    pub min_abs_det: f64,
    pub flagged: usize,
    pub a1: A1Status,
}

impl RegularityReport {
    pub fn a2_holds(&self) -> bool {
        self.flagged == 0
    }
}

/// Checks the nondegeneracy condition `det c_{x,y} != 0` on sample pairs.
///
/// Global injectivity of `y -> -grad_x c(x, y)` cannot be certified for a
/// black-box cost; it is reported as verified only for Bregman costs.
pub fn check_a1_a2(
    cost: &dyn CostFunction,
    samples: &[(Vec<f64>, Vec<f64>)],
) -> Result<RegularityReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    let mut min_abs_det = f64::INFINITY;
    let mut flagged = 0;
    let mut bregman_spd = cost.bregman_potential().is_some();
    for (x, y) in samples {
        let abs_det = cost.mixed_hessian(x, y)?.determinant().abs();
        let bad = !(abs_det > TOL_DET);
        if bad {
            flagged += 1;
        }
        if let Some(phi) = cost.bregman_potential() {
            bregman_spd &= linalg::min_eigenvalue(&phi.hessian(y)?) > 0.0;
        }
        min_abs_det = min_abs_det.min(abs_det);
        pairs.push(PairCheck {
            x: x.clone(),
            y: y.clone(),
            abs_det,
            flagged: bad,
        });
    }
    Ok(RegularityReport {
        pairs,
        min_abs_det,
        flagged,
        a1: if bregman_spd && flagged == 0 {
            A1Status::GlobalBregman
        } else {
            A1Status::NotVerified
        },
    })
}

/// Empirical comparability constants `lambda <= c / d^2 <= Lambda`.
#[derive(Debug, Clone)]
pub struct ComparabilityEstimate {
    pub lambda_hat: f64,
    pub big_lambda_hat: f64,
    pub n_samples: usize,
    pub n_used: usize,
    pub domain_bounds: BoxBounds,
    pub approximate_distance: bool,
}

/// Samples `n_samples` pairs uniformly in `bounds` and records the extreme
/// ratios `c(x, y) / d^2(x, y)`. Pairs with `d^2 < TOL_GEOM` are skipped.
pub fn estimate_comparability(
    cost: &dyn CostFunction,
    metric: &dyn MetricModel,
    bounds: &BoxBounds,
    n_samples: usize,
    seed: u64,
) -> Result<ComparabilityEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidInput(
            "comparability needs at least 2 samples".into(),
        ));
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut used = 0;
    for _ in 0..n_samples {
        let x = bounds.sample(&mut rng);
        let y = bounds.sample(&mut rng);
        let d2 = metric.dist_sq(&x, &y)?;
        if d2 < TOL_GEOM {
            continue;
        }
        let ratio = cost.eval(&x, &y)? / d2;
        lo = lo.min(ratio);
        hi = hi.max(ratio);
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptySample);
    }
    Ok(ComparabilityEstimate {
        lambda_hat: lo,
        big_lambda_hat: hi,
        n_samples,
        n_used: used,
        domain_bounds: bounds.clone(),
        approximate_distance: metric.distance_kind().is_approximate(),
    })
}

/// The one-dimensional Gaussian log-partition potential on `R x (-inf, 0)`.
pub fn gaussian_log_partition_potential() -> Arc<dyn ConvexPotential> {
    Arc::new(GaussianLogPartition)
}
