use std::fmt;

use nalgebra::DMatrix;

use crate::linalg;
use crate::{Error, Result};

/// A smooth strictly convex function `phi` on an open convex set.
///
/// The Hessian `D^2 phi` is the Riemannian metric induced by the Bregman
/// divergence of `phi`.
pub trait ConvexPotential: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn name(&self) -> String;

    /// Whether `x` lies in the (open) domain of `phi`.
    fn contains(&self, _x: &[f64]) -> bool {
        true
    }

    fn value(&self, x: &[f64]) -> Result<f64>;

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>>;

    /// A point of the domain used to start iterative inversions.
    fn interior_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// `(D phi)^{-1}(p)`. The default runs damped Newton on `phi(x) - p.x`.
    fn gradient_inverse(&self, p: &[f64]) -> Result<Vec<f64>> {
        newton_gradient_inverse(self, p, &self.interior_point())
    }
}

const INVERSE_MAX_ITERS: usize = 100;
const INVERSE_TOL: f64 = 1e-13;

/// Damped Newton for `D phi(x) = p` starting from `x0`.
///
/// Minimizes the convex function `phi(x) - p.x` with backtracking that also
/// keeps iterates inside the domain of `phi`.
pub fn newton_gradient_inverse<P>(potential: &P, p: &[f64], x0: &[f64]) -> Result<Vec<f64>>
where
    P: ConvexPotential + ?Sized,
{
    let objective = |x: &[f64]| -> Result<f64> { Ok(potential.value(x)? - linalg::dot(p, x)) };
    let mut x = x0.to_vec();
    let scale = 1.0 + linalg::norm(p);
    let mut residual = f64::INFINITY;
    for _ in 0..INVERSE_MAX_ITERS {
        let grad: Vec<f64> = linalg::sub(&potential.gradient(&x)?, p);
        residual = linalg::norm(&grad);
        if residual <= INVERSE_TOL * scale {
            return Ok(x);
        }
        let hess = potential.hessian(&x)?;
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        let step = match linalg::solve(&hess, &neg) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            // Degenerate Hessian: fall back to a gradient step.
            _ => neg.clone(),
        };
        let f0 = objective(&x)?;
        let slope = linalg::dot(&grad, &step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi + t * si).collect();
            if potential.contains(&trial) {
                if let Ok(f1) = objective(&trial) {
                    if f1 <= f0 + 1e-4 * t * slope + 1e-15 * f0.abs().max(1.0) {
                        x = trial;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let grad = linalg::sub(&potential.gradient(&x)?, p);
    residual = residual.min(linalg::norm(&grad));
    if residual <= 1e-9 * scale {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            what: "gradient inversion",
            iterations: INVERSE_MAX_ITERS,
            residual,
        })
    }
}

/// `phi(x) = |x|^2 / 2`; induces the Euclidean metric.
#[derive(Debug, Clone)]
pub struct QuadraticPotential {
    dim: usize,
}

impl QuadraticPotential {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl ConvexPotential for QuadraticPotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        "quadratic".into()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(0.5 * linalg::dot(x, x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }

    fn hessian(&self, _x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.dim, self.dim))
    }

    fn gradient_inverse(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(p.to_vec())
    }
}

/// Separable polynomial `phi(x) = sum_a sum_k c_k x_a^k`.
///
/// Convexity is the caller's responsibility; `validate` style checks report
/// where the second derivative degenerates.
#[derive(Debug, Clone)]
pub struct SeparablePolynomial {
    dim: usize,
    coefficients: Vec<f64>,
    label: String,
}

impl SeparablePolynomial {
    pub fn new(dim: usize, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() < 3 || coefficients[2..].iter().all(|c| *c == 0.0) {
            return Err(Error::InvalidInput(
                "polynomial potential needs a nonzero coefficient of degree >= 2".into(),
            ));
        }
        let label = format!("polynomial{:?}", coefficients);
        Ok(Self {
            dim,
            coefficients,
            label,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.label = name.into();
        self
    }

    /// `phi(x) = x^4` per coordinate.
    pub fn quartic(dim: usize) -> Self {
        Self::new(dim, vec![0.0, 0.0, 0.0, 0.0, 1.0])
            .expect("valid coefficients")
            .with_name("quartic")
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    fn p(&self, t: f64) -> f64 {
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * t + c)
    }

    fn dp(&self, t: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * t + k as f64 * c)
    }

    fn d2p(&self, t: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * t + (k * (k - 1)) as f64 * c)
    }

    /// Solves `p'(t) = target` for one coordinate by bracketing plus safeguarded Newton.
    fn invert_scalar(&self, target: f64) -> Result<f64> {
        let (mut lo, mut hi) = (-1.0, 1.0);
        let mut expansions = 0;
        while self.dp(lo) > target || self.dp(hi) < target {
            if self.dp(lo) > target {
                lo *= 2.0;
            }
            if self.dp(hi) < target {
                hi *= 2.0;
            }
            expansions += 1;
            if expansions > 200 {
                return Err(Error::Domain(format!(
                    "{}: gradient value {target} is not attained",
                    self.label
                )));
            }
        }
        let mut t = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = self.dp(t) - target;
            if f.abs() <= INVERSE_TOL * (1.0 + target.abs()) {
                return Ok(t);
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let d = self.d2p(t);
            let newton = t - f / d;
            t = if d > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * (1.0 + t.abs()) {
                return Ok(t);
            }
        }
        Ok(t)
    }
}

impl ConvexPotential for SeparablePolynomial {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        self.label.clone()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(x.iter().map(|&t| self.p(t)).sum())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|&t| self.dp(t)).collect())
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let diag: Vec<f64> = x.iter().map(|&t| self.d2p(t)).collect();
        Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)))
    }

    fn gradient_inverse(&self, p: &[f64]) -> Result<Vec<f64>> {
        p.iter().map(|&t| self.invert_scalar(t)).collect()
    }
}

/// One-dimensional Gaussian log-partition potential in natural parameters
/// `theta = (theta1, theta2)` with `theta2 < 0`:
///
/// `phi(theta) = -theta1^2 / (4 theta2) - log(-2 theta2) / 4`.
#[derive(Debug, Clone, Default)]
pub struct GaussianLogPartition;

impl GaussianLogPartition {
    fn check(theta: &[f64]) -> Result<()> {
        if theta.len() != 2 {
            return Err(Error::Domain(format!(
                "log-partition potential expects 2 coordinates, got {}",
                theta.len()
            )));
        }
        if theta[1] >= 0.0 || !theta[1].is_finite() {
            return Err(Error::Domain(format!(
                "log-partition potential requires theta2 < 0, got {}",
                theta[1]
            )));
        }
        Ok(())
    }
}

impl ConvexPotential for GaussianLogPartition {
    fn dim(&self) -> usize {
        2
    }

    fn name(&self) -> String {
        "gaussian_log_partition".into()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.len() == 2 && x[1] < 0.0
    }

    fn interior_point(&self) -> Vec<f64> {
        vec![0.0, -0.5]
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Self::check(x)?;
        let (a, b) = (x[0], x[1]);
        Ok(-a * a / (4.0 * b) - 0.25 * (-2.0 * b).ln())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Self::check(x)?;
        let (a, b) = (x[0], x[1]);
        Ok(vec![-a / (2.0 * b), a * a / (4.0 * b * b) - 0.25 / b])
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Self::check(x)?;
        let (a, b) = (x[0], x[1]);
        let haa = -1.0 / (2.0 * b);
        let hab = a / (2.0 * b * b);
        let hbb = -a * a / (2.0 * b * b * b) + 0.25 / (b * b);
        Ok(DMatrix::from_row_slice(2, 2, &[haa, hab, hab, hbb]))
    }

    fn gradient_inverse(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != 2 {
            return Err(Error::Domain("expected 2 coordinates".into()));
        }
        // p1 = -theta1 / (2 theta2), p2 = p1^2 - 1 / (4 theta2).
        let gap = p[1] - p[0] * p[0];
        if gap <= 0.0 {
            return Err(Error::Domain(format!(
                "({}, {}) is outside the gradient image (needs p2 > p1^2)",
                p[0], p[1]
            )));
        }
        let theta2 = -0.25 / gap;
        Ok(vec![-2.0 * theta2 * p[0], theta2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_derivatives_match_finite_differences() {
        let p = SeparablePolynomial::new(2, vec![0.3, -1.0, 0.5, 0.2, 1.0 / 12.0]).unwrap();
        let x = [0.7, -1.3];
        let g = p.gradient(&x).unwrap();
        let fd = linalg::fd_gradient(|z| p.value(z), &x).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
        let h = p.hessian(&x).unwrap();
        let fdh = linalg::fd_jacobian(|z| p.gradient(z), &x, 2).unwrap();
        assert!((h - fdh).amax() < 1e-7);
    }

    #[test]
    fn quartic_inverse_gradient() {
        let p = SeparablePolynomial::quartic(1);
        // D phi(y) = 4 y^3, so y = (p / 4)^{1/3}.
        let y = p.gradient_inverse(&[18.0]).unwrap();
        assert!((y[0] - 4.5f64.cbrt()).abs() < 1e-12);
        let y = p.gradient_inverse(&[-4.0]).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_partition_value_at_reference_point() {
        let phi = GaussianLogPartition;
        assert!(phi.value(&[0.0, -0.5]).unwrap().abs() < 1e-15);
        assert!(matches!(phi.value(&[0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(phi.value(&[1.0, 0.3]), Err(Error::Domain(_))));
    }

    #[test]
    fn log_partition_derivatives_and_inverse() {
        let phi = GaussianLogPartition;
        for x in [[0.3, -0.7], [-1.2, -0.2], [2.0, -3.0]] {
            let g = phi.gradient(&x).unwrap();
            let fd = linalg::fd_gradient(|z| phi.value(z), &x).unwrap();
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-7 * (1.0 + a.abs()));
            }
            let h = phi.hessian(&x).unwrap();
            let fdh = linalg::fd_jacobian(|z| phi.gradient(z), &x, 2).unwrap();
            assert!((&h - fdh).amax() < 1e-6 * (1.0 + h.amax()));
            assert!(linalg::min_eigenvalue(&h) > 0.0);
            let back = phi.gradient_inverse(&g).unwrap();
            assert!((back[0] - x[0]).abs() < 1e-12 && (back[1] - x[1]).abs() < 1e-12);
            let newton = newton_gradient_inverse(&phi, &g, &phi.interior_point()).unwrap();
            assert!((newton[0] - x[0]).abs() < 1e-8 && (newton[1] - x[1]).abs() < 1e-8);
        }
    }
}
