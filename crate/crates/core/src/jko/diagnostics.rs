use std::sync::Arc;

use super::{FlowTrajectory, JkoConfig};
use crate::geometry::{CostFunction, MetricModel};
use crate::measures::{DiscreteDensity, DiscreteDomain};
use crate::transport::{entropic_ot, exact_ot, CostMatrix, SolverTag, TransportPlan};
use crate::{Error, Result};

pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Smooth fields whose normal component vanishes on the boundary of the box.
pub fn default_el_fields(domain: &DiscreteDomain) -> Vec<VectorField> {
    let b = domain.bounds().clone();
    let pi = std::f64::consts::PI;
    let s = move |x: &[f64], a: usize| (x[a] - b.lower[a]) / (b.upper[a] - b.lower[a]);
    if domain.dim() == 1 {
        (1..=3)
            .map(|k| {
                let s = s.clone();
                Arc::new(move |x: &[f64]| vec![(k as f64 * pi * s(x, 0)).sin()]) as VectorField
            })
            .collect()
    } else {
        let (s1, s2, s3) = (s.clone(), s.clone(), s);
        vec![
            Arc::new(move |x: &[f64]| vec![(pi * s1(x, 0)).sin(), 0.0]) as VectorField,
            Arc::new(move |x: &[f64]| vec![0.0, (pi * s2(x, 1)).sin()]),
            Arc::new(move |x: &[f64]| vec![(pi * s3(x, 0)).sin() * (pi * s3(x, 1)).cos(), 0.0]),
        ]
    }
}

struct FieldData {
    xi: Vec<Vec<f64>>,
    div_g: Vec<f64>,
    div_coord: Vec<f64>,
}

/// Node data for the first-variation identity, reused across steps.
#[derive(Debug)]
pub(crate) struct ElCache {
    n: usize,
    dim: usize,
    grad_x: Vec<f64>,
    psi_grad: Vec<Vec<f64>>,
    fields: Vec<FieldData>,
}

impl std::fmt::Debug for FieldData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FieldData")
            .field("nodes", &self.xi.len())
            .finish()
    }
}

impl ElCache {
    pub(crate) fn new(
        cost: &dyn CostFunction,
        domain: &DiscreteDomain,
        fields: &[VectorField],
        psi: &crate::measures::DriftPotential,
    ) -> Result<Self> {
        let n = domain.len();
        let dim = domain.dim();
        let mut grad_x = Vec::with_capacity(n * n * dim);
        for x in domain.nodes() {
            for y in domain.nodes() {
                grad_x.extend(cost.grad_x(x, y)?);
            }
        }
        let metric = domain.metric();
        let h = domain.spacing();
        let mut data = Vec::with_capacity(fields.len());
        for field in fields {
            let mut xi = Vec::with_capacity(n);
            let mut div_g = Vec::with_capacity(n);
            let mut div_coord = Vec::with_capacity(n);
            for x in domain.nodes() {
                let sqrt_g = metric.volume_density(x)?;
                let (mut dg, mut dc) = (0.0, 0.0);
                for a in 0..dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] += h[a];
                    xm[a] -= h[a];
                    let (fp, fm) = (field(&xp)[a], field(&xm)[a]);
                    dc += (fp - fm) / (2.0 * h[a]);
                    dg += (metric.volume_density(&xp)? * fp - metric.volume_density(&xm)? * fm)
                        / (2.0 * h[a]);
                }
                xi.push(field(x));
                div_g.push(dg / sqrt_g);
                div_coord.push(dc);
            }
            data.push(FieldData {
                xi,
                div_g,
                div_coord,
            });
        }
        let psi_grad = domain.nodes().iter().map(|x| psi.grad(x)).collect();
        Ok(Self {
            n,
            dim,
            grad_x,
            psi_grad,
            fields: data,
        })
    }

    pub(crate) fn residuals(
        &self,
        rho_next: &DiscreteDensity,
        plan: &TransportPlan,
        config: &JkoConfig,
        eps: f64,
        linear: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let m = rho_next.masses();
        let tau = config.tau;
        let beta = config.effective_beta_inv(eps)?;
        let linear_grad = linear.map(|l| grid_gradient(rho_next.domain(), l));
        let mut out = Vec::with_capacity(self.fields.len());
        for fd in &self.fields {
            let mut a = 0.0;
            for i in 0..self.n {
                let mut drift: f64 = crate::linalg::dot(&self.psi_grad[i], &fd.xi[i]);
                if let Some(lg) = &linear_grad {
                    drift += crate::linalg::dot(&lg[i], &fd.xi[i]) / tau;
                }
                a += m[i] * (beta * fd.div_g[i] + eps / tau * fd.div_coord[i] - drift);
            }
            let mut b = 0.0;
            for i in 0..self.n {
                let xi = &fd.xi[i];
                for j in 0..self.n {
                    let p = plan.coupling[i * self.n + j];
                    if p > 0.0 {
                        let g = &self.grad_x
                            [(i * self.n + j) * self.dim..(i * self.n + j + 1) * self.dim];
                        b += p * crate::linalg::dot(xi, g);
                    }
                }
            }
            out.push((a - b / tau).abs());
        }
        Ok(out)
    }

    pub(crate) fn max_residual(
        &self,
        rho_next: &DiscreteDensity,
        plan: &TransportPlan,
        config: &JkoConfig,
        eps: f64,
        linear: Option<&[f64]>,
    ) -> Result<f64> {
        Ok(self
            .residuals(rho_next, plan, config, eps, linear)?
            .into_iter()
            .fold(0.0, f64::max))
    }
}

/// Gradient of nodal values by centered differences, one-sided on the
/// boundary.
fn grid_gradient(domain: &DiscreteDomain, values: &[f64]) -> Vec<Vec<f64>> {
    let shape = domain.shape();
    let nodes = domain.nodes();
    (0..values.len())
        .map(|k| {
            let idx = domain.multi_index(k);
            (0..shape.len())
                .map(|a| {
                    if shape[a] < 2 {
                        return 0.0;
                    }
                    let mut lo = idx.clone();
                    let mut hi = idx.clone();
                    lo[a] = idx[a].saturating_sub(1);
                    hi[a] = (idx[a] + 1).min(shape[a] - 1);
                    let (i, j) = (domain.index(&lo), domain.index(&hi));
                    (values[j] - values[i]) / (nodes[j][a] - nodes[i][a])
                })
                .collect()
        })
        .collect()
}

/// First-variation residual of one proximal step for each field:
///
/// `| int (b div_g xi + (eps/tau) div xi - <grad psi, xi>) d rho_next
///    - (1/tau) sum_ij pi_ij <xi(x_i), grad_x c(x_i, y_j)> |`
///
/// where `eps` is the plan's entropic parameter (0 for exact plans) and `b`
/// the entropy weight used by the step. Divergences use centered differences
/// with the grid spacing.
pub fn euler_lagrange_residual(
    rho_next: &DiscreteDensity,
    rho_prev: &DiscreteDensity,
    plan: &TransportPlan,
    config: &JkoConfig,
    fields: &[VectorField],
) -> Result<Vec<f64>> {
    let n = rho_next.domain().len();
    if plan.rows != n || plan.cols != rho_prev.domain().len() {
        return Err(Error::InvalidInput(
            "plan does not match the densities".into(),
        ));
    }
    let gap = plan.marginal_residual(&rho_next.masses(), &rho_prev.masses());
    if gap > 1e-6 {
        log::warn!("plan marginals are off by {gap:e}");
    }
    let eps = match plan.solver {
        SolverTag::Exact => 0.0,
        SolverTag::Entropic { eps } => eps,
    };
    let cache = ElCache::new(config.cost.as_ref(), rho_next.domain(), fields, &config.psi)?;
    let cfg = if eps == 0.0 {
        let mut c = config.clone();
        c.blur_correction = false;
        c
    } else {
        config.clone()
    };
    cache.residuals(rho_next, plan, &cfg, eps, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelescopingReport {
    /// `(1/tau) sum_k T_c(rho_{k+1}, rho_k)`.
    pub lhs: f64,
    /// `E + D` at step 0 minus at step K, plus `K * inner_tol`.
    pub rhs: f64,
    pub holds: bool,
    /// Whether every term used the exact transport cost.
    pub exact: bool,
    /// Same inequality for the problem the entropic steps actually solve:
    /// `(1/tau) sum_k [T_eps(rho_{k+1}, rho_k) - T_eps(rho_k, rho_k)]`
    /// against the decrease of `beta_eff^{-1} E + D`. `None` for exact steps.
    pub regularized: Option<(f64, f64)>,
}

impl TelescopingReport {
    pub fn regularized_holds(&self) -> Option<bool> {
        self.regularized.map(|(l, r)| l <= r)
    }
}

/// Checks `(1/tau) sum T_c(rho_{k+1}, rho_k) <= (E+D)(rho_0) - (E+D)(rho_K) + K tol`.
pub fn telescoping_check(traj: &FlowTrajectory) -> TelescopingReport {
    let config = &traj.config;
    let tau = config.tau;
    let steps = &traj.records[1..];
    let mut exact = true;
    let sum: f64 = steps
        .iter()
        .map(|r| match r.transport_exact {
            Some(t) => t,
            None => {
                exact = false;
                r.transport_raw
            }
        })
        .sum();
    let k = steps.len();
    let slack = k as f64 * config.inner_tol;
    let first = &traj.records[0];
    let last = &traj.records[k];
    let regularized = (k > 0 && steps.iter().all(|r| r.transport_reference.is_some()))
        .then(|| {
            let beta = config.effective_beta_inv(last.eps).ok()?;
            let excess: f64 = steps
                .iter()
                .map(|r| r.transport - r.transport_reference.unwrap_or(0.0))
                .sum();
            let drop = beta * (first.entropy - last.entropy) + first.drift - last.drift;
            Some((excess / tau, drop + slack))
        })
        .flatten();
    let lhs = sum / tau;
    let rhs = first.energy - last.energy + slack;
    TelescopingReport {
        lhs,
        rhs,
        holds: lhs <= rhs,
        exact,
        regularized,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeRegularityReport {
    /// `(N, N', T_c(rho_{N'}, rho_N))` for the sampled pairs.
    pub pairs: Vec<(usize, usize, f64)>,
    /// `sup T_c / (tau |N' - N|)` over the sampled pairs.
    pub constant: f64,
    /// Same constant for `W_2^2` when a metric was supplied.
    pub w2_constant: Option<f64>,
    /// Largest adjacent-step transport cost.
    pub adjacent_max: f64,
    /// `tau ((E+D)(rho_0) - min_k (E+D)(rho_k))`.
    pub adjacent_bound: f64,
    /// Some costs came from the entropic fallback.
    pub approximate: bool,
    pub finite: bool,
}

impl TimeRegularityReport {
    /// Whether the two constants agree within `factor`.
    pub fn stable_with(&self, other: &TimeRegularityReport, factor: f64) -> bool {
        let (a, b) = (self.constant, other.constant);
        a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0 && a.max(b) / a.min(b) <= factor
    }
}

/// Empirical time-regularity constant of a trajectory. Pairs use lags
/// `1, 2, 4, ...` with at most `pairs_per_lag` evenly spaced starts each.
pub fn time_regularity_report(
    traj: &FlowTrajectory,
    metric: Option<&dyn MetricModel>,
    pairs_per_lag: usize,
) -> Result<TimeRegularityReport> {
    let domain = traj.steps[0].domain();
    let cost = CostMatrix::from_cost(traj.config.cost.as_ref(), domain.nodes(), domain.nodes())?;
    let w2 = match metric {
        Some(m) => Some(CostMatrix::from_metric(m, domain.nodes(), domain.nodes())?),
        None => None,
    };
    let tau = traj.config.tau;
    let k = traj.steps.len() - 1;
    let masses: Vec<Vec<f64>> = traj.steps.iter().map(|s| s.masses()).collect();
    let mut approximate = false;
    let mut transport = |c: &CostMatrix, a: &[f64], b: &[f64]| -> Result<f64> {
        match exact_ot(c, a, b) {
            Ok(p) => Ok(p.cost_value),
            Err(Error::SizeCap { .. }) => {
                approximate = true;
                Ok(entropic_ot(c, a, b, 1e-3 * c.median().max(1e-12))?.cost_value)
            }
            Err(e) => Err(e),
        }
    };
    let mut pairs = Vec::new();
    let mut constant: f64 = 0.0;
    let mut w2_constant: f64 = 0.0;
    let mut lag = 1;
    while lag <= k {
        let starts = k - lag + 1;
        let count = pairs_per_lag.max(1).min(starts);
        for s in 0..count {
            let n0 = if count == 1 {
                0
            } else {
                s * (starts - 1) / (count - 1)
            };
            let n1 = n0 + lag;
            let t = transport(&cost, &masses[n1], &masses[n0])?;
            constant = constant.max(t / (tau * lag as f64));
            if let Some(c) = &w2 {
                let t2 = transport(c, &masses[n1], &masses[n0])?;
                w2_constant = w2_constant.max(t2 / (tau * lag as f64));
            }
            pairs.push((n0, n1, t));
        }
        lag *= 2;
    }
    let adjacent_max = pairs
        .iter()
        .filter(|(a, b, _)| b - a == 1)
        .map(|p| p.2)
        .fold(0.0, f64::max);
    let e0 = traj.records[0].energy;
    let emin = traj
        .records
        .iter()
        .map(|r| r.energy)
        .fold(f64::INFINITY, f64::min);
    Ok(TimeRegularityReport {
        finite: constant.is_finite(),
        pairs,
        constant,
        w2_constant: w2.map(|_| w2_constant),
        adjacent_max,
        adjacent_bound: tau * (e0 - emin),
        approximate,
    })
}
