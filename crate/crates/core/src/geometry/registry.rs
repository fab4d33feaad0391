use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::cost::{
    bregman_cost, dirichlet_log_cost, mahalanobis_cost, quadratic_cost, CostFunction,
};
use super::potential::{
    ConvexPotential, GaussianLogPartition, QuadraticPotential, SeparablePolynomial,
};
use crate::{Error, Result};

/// Declarative description of a user potential.
#[derive(Debug, Clone, PartialEq)]
pub enum PotentialFamily {
    /// `phi(x) = sum_i sum_k a_k x_i^k`.
    Polynomial { coefficients: Vec<f64> },
    /// `scale` times the Gaussian log-partition function (two coordinates).
    LogPartition { scale: f64 },
}

/// Name-based lookup of potentials and costs.
///
/// Built-in potentials: `quadratic`, `quartic`, `gaussian_log_partition`.
/// Cost names: `quadratic`, `bregman:<potential>`, `mahalanobis:<potential>`,
/// `dirichlet_log`.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    user: BTreeMap<String, PotentialFamily>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, family: PotentialFamily) -> Result<()> {
        let name = name.into();
        if matches!(
            name.as_str(),
            "quadratic" | "quartic" | "gaussian_log_partition"
        ) {
            return Err(Error::InvalidInput(format!(
                "potential name '{name}' is reserved"
            )));
        }
        if name.is_empty() || name.contains(':') {
            return Err(Error::InvalidInput(format!(
                "invalid potential name '{name}'"
            )));
        }
        match &family {
            PotentialFamily::LogPartition { scale } if !(*scale > 0.0) => {
                return Err(Error::InvalidInput(
                    "log-partition scale must be positive".into(),
                ))
            }
            PotentialFamily::Polynomial { coefficients } => {
                SeparablePolynomial::new(1, coefficients.clone())?;
            }
            _ => {}
        }
        self.user.insert(name, family);
        Ok(())
    }

    /// Resolves a potential; `dim` sizes the separable families.
    pub fn potential(&self, name: &str, dim: usize) -> Result<Arc<dyn ConvexPotential>> {
        let p: Arc<dyn ConvexPotential> = match name {
            "quadratic" => Arc::new(QuadraticPotential::new(dim)),
            "quartic" => Arc::new(SeparablePolynomial::quartic(dim)),
            "gaussian_log_partition" => Arc::new(GaussianLogPartition),
            other => match self.user.get(other) {
                Some(PotentialFamily::Polynomial { coefficients }) => {
                    Arc::new(SeparablePolynomial::new(dim, coefficients.clone())?.with_name(other))
                }
                Some(PotentialFamily::LogPartition { scale }) => Arc::new(ScaledPotential {
                    inner: Arc::new(GaussianLogPartition),
                    scale: *scale,
                    label: other.to_string(),
                }),
                None => return Err(Error::InvalidInput(format!("unknown potential '{other}'"))),
            },
        };
        if p.dim() != dim {
            return Err(Error::InvalidInput(format!(
                "potential '{name}' has dimension {}, domain has {dim}",
                p.dim()
            )));
        }
        Ok(p)
    }

    /// Resolves a cost by name. The Dirichlet cost works in `dim`-dimensional
    /// chart coordinates of the `(dim + 1)`-simplex.
    pub fn cost(&self, name: &str, dim: usize) -> Result<Arc<dyn CostFunction>> {
        if name == "quadratic" {
            return Ok(quadratic_cost(dim));
        }
        if name == "dirichlet_log" {
            return dirichlet_log_cost(dim + 1);
        }
        if let Some(p) = name.strip_prefix("bregman:") {
            return Ok(bregman_cost(self.potential(p, dim)?));
        }
        if let Some(p) = name.strip_prefix("mahalanobis:") {
            return Ok(mahalanobis_cost(self.potential(p, dim)?));
        }
        Err(Error::InvalidInput(format!("unknown cost '{name}'")))
    }
}

#[derive(Debug)]
struct ScaledPotential {
    inner: Arc<dyn ConvexPotential>,
    scale: f64,
    label: String,
}

impl ConvexPotential for ScaledPotential {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn name(&self) -> String {
        self.label.clone()
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.inner.contains(x)
    }

    fn interior_point(&self) -> Vec<f64> {
        self.inner.interior_point()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.scale * self.inner.value(x)?)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .inner
            .gradient(x)?
            .into_iter()
            .map(|g| self.scale * g)
            .collect())
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.inner.hessian(x)? * self.scale)
    }

    fn gradient_inverse(&self, p: &[f64]) -> Result<Vec<f64>> {
        let q: Vec<f64> = p.iter().map(|v| v / self.scale).collect();
        self.inner.gradient_inverse(&q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names_resolve() {
        let r = Registry::new();
        assert_eq!(
            r.cost("quadratic", 2)
                .unwrap()
                .eval(&[1.0, 0.0], &[0.0, 0.0])
                .unwrap(),
            0.5
        );
        let c = r.cost("bregman:quartic", 1).unwrap();
        assert!((c.eval(&[2.0], &[1.0]).unwrap() - 11.0).abs() < 1e-12);
        let m = r.cost("mahalanobis:quartic", 1).unwrap();
        assert!((m.eval(&[2.0], &[1.0]).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(r.cost("dirichlet_log", 2).unwrap().dim(), 2);
        assert!(r.cost("bregman:gaussian_log_partition", 2).is_ok());
        assert!(r.cost("bregman:gaussian_log_partition", 1).is_err());
        assert!(r.cost("nope", 1).is_err());
        assert!(r.cost("bregman:nope", 1).is_err());
    }

    #[test]
    fn user_families() {
        let mut r = Registry::new();
        r.declare(
            "soft",
            PotentialFamily::Polynomial {
                coefficients: vec![0.0, 0.0, 0.5, 0.0, 1.0 / 12.0],
            },
        )
        .unwrap();
        r.declare("lp2", PotentialFamily::LogPartition { scale: 2.0 })
            .unwrap();
        assert!(r
            .declare("quartic", PotentialFamily::LogPartition { scale: 1.0 })
            .is_err());
        assert!(r
            .declare("bad", PotentialFamily::LogPartition { scale: -1.0 })
            .is_err());

        let phi = r.potential("soft", 1).unwrap();
        assert!((phi.hessian(&[1.0]).unwrap()[(0, 0)] - 2.0).abs() < 1e-12);

        let lp = r.potential("lp2", 2).unwrap();
        let x = [0.3, -0.7];
        let back = lp.gradient_inverse(&lp.gradient(&x).unwrap()).unwrap();
        assert!((back[0] - x[0]).abs() < 1e-10 && (back[1] - x[1]).abs() < 1e-10);
    }
}
