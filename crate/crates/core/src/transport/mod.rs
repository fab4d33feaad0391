//! Discrete optimal transport between node masses.

mod entropic;
mod exact;

use std::io::Write;

use crate::geometry::{ConvexPotential, CostFunction, MetricModel};
use crate::measures::DiscreteDensity;
use crate::{Error, Result};

pub use entropic::{
    entropic_ot, entropic_ot_with, entropic_self_transport, entropic_self_transport_potentials,
    EntropicOptions, SelfTransport,
};
pub use exact::{exact_ot, exact_ot_with, is_monge, ExactOptions, EXACT_SIZE_CAP, TOL_LP};

pub const TOL_MARGINAL_EXACT: f64 = 1e-9;
pub const TOL_MARGINAL_ENTROPIC: f64 = 1e-6;

/// Dense row-major matrix of nonnegative transport costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    /// Entries in `[-1e-12 * max, 0)` are rounding noise and are set to zero;
    /// anything more negative is rejected.
    pub fn new(rows: usize, cols: usize, mut entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "{} entries for a {rows}x{cols} cost matrix",
                entries.len()
            )));
        }
        let scale = entries.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for v in entries.iter_mut() {
            if !v.is_finite() {
                return Err(Error::InvalidInput("cost entries must be finite".into()));
            }
            if *v < 0.0 {
                if *v < -1e-12 * scale {
                    return Err(Error::InvalidInput(format!("negative cost entry {v:e}")));
                }
                *v = 0.0;
            }
        }
        Ok(Self {
            rows,
            cols,
            entries,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let entries = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self::new(rows, cols, entries)
    }

    /// `c(source_i, target_j)`.
    pub fn from_cost(
        cost: &dyn CostFunction,
        sources: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(sources.len() * targets.len());
        for x in sources {
            for y in targets {
                entries.push(cost.eval(x, y)?);
            }
        }
        Self::new(sources.len(), targets.len(), entries)
    }

    /// Squared Riemannian distances between nodes.
    pub fn from_metric(
        metric: &dyn MetricModel,
        sources: &[Vec<f64>],
        targets: &[Vec<f64>],
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(sources.len() * targets.len());
        for x in sources {
            for y in targets {
                entries.push(metric.dist_sq(x, y)?);
            }
        }
        Self::new(sources.len(), targets.len(), entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(*v))
    }

    /// Median of all entries.
    pub fn median(&self) -> f64 {
        crate::linalg::median(&self.entries)
    }

    /// Median of the strictly positive entries (0 if there are none).
    pub fn positive_median(&self) -> f64 {
        let pos: Vec<f64> = self.entries.iter().copied().filter(|v| *v > 0.0).collect();
        if pos.is_empty() {
            0.0
        } else {
            crate::linalg::median(&pos)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverTag {
    Exact,
    Entropic { eps: f64 },
}

/// Coupling between source and target node masses.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    /// Row-major masses `pi_ij`.
    pub coupling: Vec<f64>,
    /// `sum_ij pi_ij C_ij`.
    pub cost_value: f64,
    pub solver: SolverTag,
    /// Dual potentials `(u, v)` with `u_i + v_j <= C_ij` (exact) or the
    /// log-domain scaling potentials (entropic).
    pub duals: (Vec<f64>, Vec<f64>),
    /// Entropic only: `<C, pi> + eps sum pi log pi`.
    pub regularized_value: Option<f64>,
    /// Entropic only: Sinkhorn divergence, when requested.
    pub debiased_value: Option<f64>,
    pub iterations: usize,
    /// Exact only: the optimal basis has zero-flow basic cells.
    pub degenerate: bool,
    /// Exact only: largest dual infeasibility or complementary slackness gap.
    pub certificate_residual: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.coupling.chunks(self.cols) {
            for (a, b) in s.iter_mut().zip(r) {
                *a += b;
            }
        }
        s
    }

    /// Largest absolute marginal violation.
    pub fn marginal_residual(&self, mu: &[f64], nu: &[f64]) -> f64 {
        let r = self
            .row_sums()
            .iter()
            .zip(mu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let c = self
            .col_sums()
            .iter()
            .zip(nu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        r.max(c)
    }

    /// Writes `i,j,mass` for every positive entry.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["i", "j", "mass"])?;
        for (k, m) in self.coupling.iter().enumerate() {
            if *m > 0.0 {
                w.write_record(&[
                    (k / self.cols).to_string(),
                    (k % self.cols).to_string(),
                    format!("{m:.17e}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn check_marginals(cost: &CostMatrix, mu: &[f64], nu: &[f64]) -> Result<()> {
    if mu.len() != cost.rows() || nu.len() != cost.cols() {
        return Err(Error::InvalidInput(format!(
            "marginals of length {}/{} for a {}x{} cost",
            mu.len(),
            nu.len(),
            cost.rows(),
            cost.cols()
        )));
    }
    if mu.iter().chain(nu).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(
            "marginals must be finite and nonnegative".into(),
        ));
    }
    let (sa, sb): (f64, f64) = (mu.iter().sum(), nu.iter().sum());
    if !(sa > 0.0) || (sa - sb).abs() > 1e-9 * sa.max(sb) {
        return Err(Error::InvalidInput(format!(
            "unbalanced marginals: {sa} vs {sb}"
        )));
    }
    Ok(())
}

/// Decomposition `B_phi(x_i, y_j) = quad_ij + a_i - b_j` with
/// `quad_ij = |x_i - D phi(y_j)|^2 / 2`.
#[derive(Debug, Clone)]
pub struct BregmanReduction {
    pub quad: CostMatrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl BregmanReduction {
    pub fn reconstruct(&self, i: usize, j: usize) -> f64 {
        self.quad.get(i, j) + self.a[i] - self.b[j]
    }

    /// Separable part of a coupling's cost: `sum a_i mu_i - sum b_j nu_j`.
    pub fn offset(&self, mu: &[f64], nu: &[f64]) -> f64 {
        crate::linalg::dot(&self.a, mu) - crate::linalg::dot(&self.b, nu)
    }
}

pub fn bregman_reduction(
    potential: &dyn ConvexPotential,
    sources: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<BregmanReduction> {
    let a = sources
        .iter()
        .map(|x| Ok(potential.value(x)? - 0.5 * crate::linalg::dot(x, x)))
        .collect::<Result<Vec<_>>>()?;
    let mut duals = Vec::with_capacity(targets.len());
    let mut b = Vec::with_capacity(targets.len());
    for y in targets {
        let p = potential.gradient(y)?;
        b.push(potential.value(y)? + 0.5 * crate::linalg::dot(&p, &p) - crate::linalg::dot(y, &p));
        duals.push(p);
    }
    let quad = CostMatrix::from_fn(sources.len(), targets.len(), |i, j| {
        let d = crate::linalg::sub(&sources[i], &duals[j]);
        0.5 * crate::linalg::dot(&d, &d)
    })?;
    Ok(BregmanReduction { quad, a, b })
}

/// Squared Wasserstein distance with cost `d_g^2` between two grid densities.
pub fn wasserstein2_sq(
    mu: &DiscreteDensity,
    nu: &DiscreteDensity,
    metric: &dyn MetricModel,
) -> Result<f64> {
    let c = CostMatrix::from_metric(metric, mu.domain().nodes(), nu.domain().nodes())?;
    Ok(exact_ot(&c, &mu.masses(), &nu.masses())?.cost_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{EuclideanMetric, QuadraticPotential, SeparablePolynomial};
    use crate::measures::DiscreteDomain;
    use std::sync::Arc;

    #[test]
    fn cost_matrix_validation() {
        assert!(CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0]).is_err());
        assert!(CostMatrix::new(1, 2, vec![0.0, -1.0]).is_err());
        let c = CostMatrix::new(1, 2, vec![-1e-20, 1.0]).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
    }

    #[test]
    fn quadratic_reduction_is_trivial() {
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|i| vec![i as f64 * 0.3, 1.0 - i as f64])
            .collect();
        let r = bregman_reduction(&QuadraticPotential::new(2), &xs, &xs).unwrap();
        assert!(r.a.iter().chain(&r.b).all(|v| v.abs() < 1e-15));
        for i in 0..4 {
            for j in 0..4 {
                let d = crate::linalg::sub(&xs[i], &xs[j]);
                assert!((r.quad.get(i, j) - 0.5 * crate::linalg::dot(&d, &d)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reduction_reconstructs_bregman() {
        let phi = SeparablePolynomial::quartic(1);
        let xs: Vec<Vec<f64>> = (0..7).map(|i| vec![0.2 + 0.3 * i as f64]).collect();
        let r = bregman_reduction(&phi, &xs, &xs).unwrap();
        let c = crate::geometry::bregman_cost(Arc::new(phi));
        for i in 0..7 {
            for j in 0..7 {
                let exact = c.eval(&xs[i], &xs[j]).unwrap();
                assert!((r.reconstruct(i, j) - exact).abs() < 1e-12 * (1.0 + exact.abs()));
            }
        }
    }

    #[test]
    fn w2_examples() {
        let d = Arc::new(
            DiscreteDomain::interval(0.0, 2.0, 2, Arc::new(EuclideanMetric::new(1))).unwrap(),
        );
        let a = DiscreteDensity::new(d.clone(), vec![1.0, 0.0]).unwrap();
        let b = DiscreteDensity::new(d.clone(), vec![0.0, 1.0]).unwrap();
        let m = EuclideanMetric::new(1);
        assert!((wasserstein2_sq(&a, &b, &m).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein2_sq(&a, &a, &m).unwrap(), 0.0);
    }

    #[test]
    fn plan_csv() {
        let c = CostMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = exact_ot(&c, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("i,j,mass"));
    }
}
