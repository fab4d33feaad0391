use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::potential::{ConvexPotential, QuadraticPotential};
use crate::linalg;
use crate::{Error, Result};

/// A transport cost `c(x, y) >= 0` vanishing exactly on the diagonal.
///
/// Derivatives default to central finite differences; implementations
/// override them where closed forms exist.
pub trait CostFunction: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn name(&self) -> String;

    fn contains(&self, _x: &[f64]) -> bool {
        true
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64>;

    /// Coordinate gradient `c_{x^i}(x, y)`.
    fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        linalg::fd_gradient(|z| self.eval(z, y), x)
    }

    /// Coordinate gradient `c_{y^i}(x, y)`.
    fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        linalg::fd_gradient(|z| self.eval(x, z), y)
    }

    /// `M[i][j] = c_{x^i, y^j}(x, y)`.
    fn mixed_hessian(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        linalg::fd_jacobian(|z| self.grad_x(x, z), y, d)
    }

    /// Whether `grad_x`, `grad_y` and `mixed_hessian` are closed-form.
    fn analytic_derivatives(&self) -> bool {
        false
    }

    /// The potential when this cost is a Bregman divergence (closed-form c-segments).
    fn bregman_potential(&self) -> Option<&dyn ConvexPotential> {
        None
    }
}

/// `c(x, y) = |x - y|^2 / 2`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    potential: QuadraticPotential,
}

pub fn quadratic_cost(dim: usize) -> Arc<dyn CostFunction> {
    Arc::new(QuadraticCost {
        potential: QuadraticPotential::new(dim),
    })
}

impl CostFunction for QuadraticCost {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn name(&self) -> String {
        "quadratic".into()
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    }

    fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::sub(x, y))
    }

    fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::sub(y, x))
    }

    fn mixed_hessian(&self, _x: &[f64], _y: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim();
        Ok(-DMatrix::identity(d, d))
    }

    fn analytic_derivatives(&self) -> bool {
        true
    }

    fn bregman_potential(&self) -> Option<&dyn ConvexPotential> {
        Some(&self.potential)
    }
}

/// Bregman divergence `B_phi(x, y) = phi(x) - phi(y) - D phi(y) . (x - y)`.
#[derive(Debug, Clone)]
pub struct BregmanCost {
    potential: Arc<dyn ConvexPotential>,
}

pub fn bregman_cost(potential: Arc<dyn ConvexPotential>) -> Arc<dyn CostFunction> {
    Arc::new(BregmanCost { potential })
}

impl BregmanCost {
    pub fn potential(&self) -> &Arc<dyn ConvexPotential> {
        &self.potential
    }
}

impl CostFunction for BregmanCost {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn name(&self) -> String {
        format!("bregman:{}", self.potential.name())
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.potential.contains(x)
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let gy = self.potential.gradient(y)?;
        let lin: f64 = gy
            .iter()
            .zip(x.iter().zip(y))
            .map(|(g, (a, b))| g * (a - b))
            .sum();
        Ok(self.potential.value(x)? - self.potential.value(y)? - lin)
    }

    fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        Ok(linalg::sub(
            &self.potential.gradient(x)?,
            &self.potential.gradient(y)?,
        ))
    }

    fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let h = self.potential.hessian(y)?;
        let diff = nalgebra::DVector::from_vec(linalg::sub(x, y));
        Ok((-(h * diff)).as_slice().to_vec())
    }

    fn mixed_hessian(&self, _x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        Ok(-self.potential.hessian(y)?)
    }

    fn analytic_derivatives(&self) -> bool {
        true
    }

    fn bregman_potential(&self) -> Option<&dyn ConvexPotential> {
        Some(self.potential.as_ref())
    }
}

/// Modified Mahalanobis cost `(x - y)^T D^2 phi(y) (x - y) / 2`.
#[derive(Debug, Clone)]
pub struct MahalanobisCost {
    potential: Arc<dyn ConvexPotential>,
}

pub fn mahalanobis_cost(potential: Arc<dyn ConvexPotential>) -> Arc<dyn CostFunction> {
    Arc::new(MahalanobisCost { potential })
}

impl CostFunction for MahalanobisCost {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn name(&self) -> String {
        format!("mahalanobis:{}", self.potential.name())
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.potential.contains(x)
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let h = self.potential.hessian(y)?;
        let diff = nalgebra::DVector::from_vec(linalg::sub(x, y));
        Ok(0.5 * diff.dot(&(h * &diff)))
    }

    fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let h = self.potential.hessian(y)?;
        let diff = nalgebra::DVector::from_vec(linalg::sub(x, y));
        Ok((h * diff).as_slice().to_vec())
    }
}

/// Logarithmic cost on the open unit simplex,
/// `c(p, q) = log(sum_i q_i / (n p_i)) - sum_i log(q_i / p_i) / n`.
///
/// As a [`CostFunction`] the cost works in the chart `(p_1, ..., p_{n-1})`
/// with `p_n = 1 - sum`, so `dim() = n - 1`. The mixed Hessian is singular in
/// ambient coordinates because the cost is invariant under `q -> lambda q`.
#[derive(Debug, Clone)]
pub struct DirichletLogCost {
    n: usize,
}

pub fn dirichlet_log_cost(n: usize) -> Result<Arc<dyn CostFunction>> {
    Ok(Arc::new(DirichletLogCost::new(n)?))
}

/// Tolerance for the simplex constraint `sum p = 1`.
pub const SIMPLEX_TOL: f64 = 1e-8;

impl DirichletLogCost {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput("simplex needs n >= 2".into()));
        }
        Ok(Self { n })
    }

    pub fn simplex_dim(&self) -> usize {
        self.n
    }

    fn check_simplex(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.n {
            return Err(Error::Domain(format!(
                "expected {} simplex coordinates, got {}",
                self.n,
                p.len()
            )));
        }
        if let Some(bad) = p.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!(
                "simplex coordinate {bad} is not positive"
            )));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("simplex coordinates sum to {total}")));
        }
        Ok(())
    }

    /// Evaluates on full simplex vectors.
    pub fn eval_simplex(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        self.check_simplex(p)?;
        self.check_simplex(q)?;
        Ok(self.eval_unchecked(p, q))
    }

    fn eval_unchecked(&self, p: &[f64], q: &[f64]) -> f64 {
        let n = self.n as f64;
        let mean_ratio: f64 = p.iter().zip(q).map(|(a, b)| b / a).sum::<f64>() / n;
        let mean_log: f64 = p.iter().zip(q).map(|(a, b)| (b / a).ln()).sum::<f64>() / n;
        mean_ratio.ln() - mean_log
    }

    /// Lifts chart coordinates to the simplex.
    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n - 1 {
            return Err(Error::Domain(format!(
                "expected {} chart coordinates, got {}",
                self.n - 1,
                x.len()
            )));
        }
        let mut p = x.to_vec();
        p.push(1.0 - x.iter().sum::<f64>());
        if let Some(bad) = p.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!(
                "simplex coordinate {bad} is not positive"
            )));
        }
        Ok(p)
    }
}

impl CostFunction for DirichletLogCost {
    fn dim(&self) -> usize {
        self.n - 1
    }

    fn name(&self) -> String {
        "dirichlet_log".into()
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.lift(x).is_ok()
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let p = self.lift(x)?;
        let q = self.lift(y)?;
        Ok(self.eval_unchecked(&p, &q))
    }

    fn grad_x(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let p = self.lift(x)?;
        let q = self.lift(y)?;
        let n = self.n as f64;
        let s: f64 = p.iter().zip(&q).map(|(a, b)| b / a).sum();
        // Ambient partials d c / d p_k.
        let amb: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(a, b)| -(b / (a * a)) / s + 1.0 / (n * a))
            .collect();
        let last = amb[self.n - 1];
        Ok(amb[..self.n - 1].iter().map(|v| v - last).collect())
    }

    fn grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let p = self.lift(x)?;
        let q = self.lift(y)?;
        let n = self.n as f64;
        let s: f64 = p.iter().zip(&q).map(|(a, b)| b / a).sum();
        let amb: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(a, b)| (1.0 / a) / s - 1.0 / (n * b))
            .collect();
        let last = amb[self.n - 1];
        Ok(amb[..self.n - 1].iter().map(|v| v - last).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::potential::SeparablePolynomial;

    #[test]
    fn quadratic_examples() {
        let c = quadratic_cost(2);
        assert_eq!(c.eval(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(c.eval(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn bregman_of_quadratic_potential_is_half_squared_distance() {
        let c = bregman_cost(Arc::new(QuadraticPotential::new(2)));
        assert!((c.eval(&[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bregman_quartic_hand_value() {
        // 2^4 - 1^4 - 4 * 1^3 * (2 - 1) = 11
        let c = bregman_cost(Arc::new(SeparablePolynomial::quartic(1)));
        assert!((c.eval(&[2.0], &[1.0]).unwrap() - 11.0).abs() < 1e-12);
        assert_eq!(c.eval(&[1.7], &[1.7]).unwrap(), 0.0);
    }

    #[test]
    fn mahalanobis_examples() {
        let c = mahalanobis_cost(Arc::new(QuadraticPotential::new(2)));
        assert!((c.eval(&[1.0, 1.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        let c = mahalanobis_cost(Arc::new(SeparablePolynomial::quartic(1)));
        // D^2 phi(1) = 12, so 12 * 1 / 2 = 6.
        assert!((c.eval(&[2.0], &[1.0]).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(c.eval(&[0.4], &[0.4]).unwrap(), 0.0);
    }

    #[test]
    fn dirichlet_examples() {
        let c = DirichletLogCost::new(3).unwrap();
        let u = [1.0 / 3.0; 3];
        assert!(c.eval_simplex(&u, &u).unwrap().abs() < 1e-15);

        let c = DirichletLogCost::new(2).unwrap();
        let (p, q) = ([0.5, 0.5], [0.25, 0.75]);
        let v = c.eval_simplex(&p, &q).unwrap();
        assert!((v - (-0.5 * 0.75f64.ln())).abs() < 1e-14);
        assert!((v - 0.1438).abs() < 1e-4);
        // Two categories: invariant under swapping, since the ratios invert.
        assert!((c.eval_simplex(&q, &p).unwrap() - v).abs() < 1e-15);
        let c3 = DirichletLogCost::new(3).unwrap();
        let (p3, q3) = ([0.2, 0.3, 0.5], [0.6, 0.3, 0.1]);
        let (a, b) = (
            c3.eval_simplex(&p3, &q3).unwrap(),
            c3.eval_simplex(&q3, &p3).unwrap(),
        );
        assert!((a - b).abs() > 1e-3, "{a} vs {b}");
        // Chart evaluation agrees with the simplex form.
        assert!((c.eval(&[0.5], &[0.25]).unwrap() - v).abs() < 1e-15);
    }

    #[test]
    fn dirichlet_domain_errors() {
        let c = DirichletLogCost::new(3).unwrap();
        assert!(matches!(
            c.eval_simplex(&[0.5, 0.5, 0.0], &[0.2, 0.3, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            c.eval_simplex(&[0.5, 0.4, 0.3], &[0.2, 0.3, 0.5]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            c.eval(&[0.7, 0.6], &[0.2, 0.3]),
            Err(Error::Domain(_))
        ));
    }
}
