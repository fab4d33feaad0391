//! Gridded domains, densities and the entropy, drift and moment functionals.
//!
//! Densities are stored with respect to the Riemannian volume `dVol_g`, so
//! integrals are `sum_i w_i f_i` with `w_i = cell volume * sqrt(det g(x_i))`.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::geometry::{BoxBounds, MetricModel};
use crate::{Error, Result};

pub const TOL_MASS: f64 = 1e-12;

/// Cell-centered tensor-product grid in one or two dimensions.
#[derive(Debug, Clone)]
pub struct DiscreteDomain {
    bounds: BoxBounds,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    nodes: Vec<Vec<f64>>,
    vol_weights: Vec<f64>,
    metric_at: Vec<DMatrix<f64>>,
    boundary_mask: Vec<bool>,
    metric: Arc<dyn MetricModel>,
}

impl DiscreteDomain {
    /// Builds the grid with `shape[a]` cells along axis `a`. Node `k` has
    /// multi-index `(k / n1, k % n1)` in two dimensions (axis 0 slowest).
    pub fn new(bounds: BoxBounds, shape: &[usize], metric: Arc<dyn MetricModel>) -> Result<Self> {
        let dim = bounds.dim();
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidInput(format!(
                "grids support dimension 1 or 2, got {dim}"
            )));
        }
        if shape.len() != dim || shape.iter().any(|&n| n < 2) {
            return Err(Error::InvalidInput(format!("invalid grid shape {shape:?}")));
        }
        if metric.dim() != dim {
            return Err(Error::InvalidInput(format!(
                "metric dimension {} does not match domain dimension {dim}",
                metric.dim()
            )));
        }
        let spacing: Vec<f64> = (0..dim)
            .map(|a| (bounds.upper[a] - bounds.lower[a]) / shape[a] as f64)
            .collect();
        let cell: f64 = spacing.iter().product();
        let total: usize = shape.iter().product();
        let mut nodes = Vec::with_capacity(total);
        let mut boundary_mask = Vec::with_capacity(total);
        for k in 0..total {
            let idx = multi_index(shape, k);
            nodes.push(
                (0..dim)
                    .map(|a| bounds.lower[a] + (idx[a] as f64 + 0.5) * spacing[a])
                    .collect::<Vec<_>>(),
            );
            boundary_mask.push((0..dim).any(|a| idx[a] == 0 || idx[a] + 1 == shape[a]));
        }
        let mut metric_at = Vec::with_capacity(total);
        let mut vol_weights = Vec::with_capacity(total);
        for x in &nodes {
            let g = metric.tensor(x)?;
            let det = g.determinant();
            if !(det > 0.0) || crate::linalg::min_eigenvalue(&g) <= 0.0 {
                return Err(Error::SingularMetric {
                    min_eigenvalue: crate::linalg::min_eigenvalue(&g),
                });
            }
            vol_weights.push(cell * det.sqrt());
            metric_at.push(g);
        }
        Ok(Self {
            bounds,
            shape: shape.to_vec(),
            spacing,
            nodes,
            vol_weights,
            metric_at,
            boundary_mask,
            metric,
        })
    }

    /// Uniform grid on an interval with `n` cells.
    pub fn interval(a: f64, b: f64, n: usize, metric: Arc<dyn MetricModel>) -> Result<Self> {
        Self::new(BoxBounds::new(vec![a], vec![b])?, &[n], metric)
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k]
    }

    pub fn vol_weights(&self) -> &[f64] {
        &self.vol_weights
    }

    pub fn metric_at(&self, k: usize) -> &DMatrix<f64> {
        &self.metric_at[k]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary_mask
    }

    pub fn metric(&self) -> &Arc<dyn MetricModel> {
        &self.metric
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Riemannian volume of the domain, by the same quadrature.
    pub fn volume(&self) -> f64 {
        self.vol_weights.iter().sum()
    }

    pub fn index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn multi_index(&self, k: usize) -> Vec<usize> {
        multi_index(&self.shape, k)
    }

    /// Integral of nodal values against `dVol_g`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&self.vol_weights)
            .map(|(v, w)| v * w)
            .sum()
    }
}

fn multi_index(shape: &[usize], mut k: usize) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = k % shape[a];
        k /= shape[a];
    }
    idx
}

/// Nonnegative density with unit mass with respect to `dVol_g`.
#[derive(Debug, Clone)]
pub struct DiscreteDensity {
    domain: Arc<DiscreteDomain>,
    values: Vec<f64>,
}

impl DiscreteDensity {
    /// Clips negative entries to zero and rescales to unit mass.
    pub fn new(domain: Arc<DiscreteDomain>, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::InvalidInput(format!(
                "{} density values for {} nodes",
                values.len(),
                domain.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("density values must be finite".into()));
        }
        for v in values.iter_mut() {
            *v = v.max(0.0);
        }
        let mass = domain.integrate(&values);
        if !(mass > 0.0) {
            return Err(Error::InvalidInput("density has zero mass".into()));
        }
        for v in values.iter_mut() {
            *v /= mass;
        }
        Ok(Self { domain, values })
    }

    pub fn from_fn(domain: Arc<DiscreteDomain>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = domain.nodes().iter().map(|x| f(x)).collect();
        Self::new(domain, values)
    }

    pub fn uniform(domain: Arc<DiscreteDomain>) -> Self {
        let v = 1.0 / domain.volume();
        let values = vec![v; domain.len()];
        Self { domain, values }
    }

    /// From node masses `m_i = rho_i w_i`.
    pub fn from_masses(domain: Arc<DiscreteDomain>, masses: &[f64]) -> Result<Self> {
        if masses.len() != domain.len() {
            return Err(Error::InvalidInput(
                "mass vector has the wrong length".into(),
            ));
        }
        let values = masses
            .iter()
            .zip(domain.vol_weights())
            .map(|(m, w)| m / w)
            .collect();
        Self::new(domain, values)
    }

    pub fn domain(&self) -> &Arc<DiscreteDomain> {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Node masses `rho_i w_i`.
    pub fn masses(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.domain.vol_weights())
            .map(|(v, w)| v * w)
            .collect()
    }

    pub fn mass(&self) -> f64 {
        self.domain.integrate(&self.values)
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.domain
            .nodes()
            .iter()
            .zip(self.masses())
            .map(|(x, m)| m * f(x))
            .sum()
    }

    /// Coordinate mean.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.domain.dim())
            .map(|a| self.integrate(|x| x[a]))
            .collect()
    }

    /// Coordinate covariance matrix.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.domain.dim();
        let mu = self.mean();
        DMatrix::from_fn(d, d, |a, b| {
            self.integrate(|x| (x[a] - mu[a]) * (x[b] - mu[b]))
        })
    }

    /// `int |rho - other| dVol_g` on a shared grid.
    pub fn l1_distance(&self, other: &DiscreteDensity) -> Result<f64> {
        if self.values.len() != other.values.len() {
            return Err(Error::InvalidInput(
                "densities live on different grids".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .zip(self.domain.vol_weights())
            .map(|((a, b), w)| (a - b).abs() * w)
            .sum())
    }

    /// Convex combination `(1 - t) self + t other`.
    pub fn mix(&self, other: &DiscreteDensity, t: f64) -> Result<DiscreteDensity> {
        if self.values.len() != other.values.len() {
            return Err(Error::InvalidInput(
                "densities live on different grids".into(),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        DiscreteDensity::new(self.domain.clone(), values)
    }
}

type ScalarField = dyn Fn(&[f64]) -> f64 + Send + Sync;
type VectorField = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Confining potential `psi >= 0` with its gradient.
#[derive(Clone)]
pub struct DriftPotential {
    name: String,
    psi: Arc<ScalarField>,
    grad: Arc<VectorField>,
}

impl std::fmt::Debug for DriftPotential {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftPotential")
            .field("name", &self.name)
            .finish()
    }
}

impl DriftPotential {
    pub fn new(
        name: impl Into<String>,
        psi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            psi: Arc::new(psi),
            grad: Arc::new(grad),
        }
    }

    pub fn zero() -> Self {
        Self::new("zero", |_| 0.0, |x| vec![0.0; x.len()])
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("constant({c})"), move |_| c, |x| vec![0.0; x.len()])
    }

    /// `psi(x) = (k / 2) |x - center|^2`.
    pub fn quadratic(center: Vec<f64>, k: f64) -> Self {
        let c2 = center.clone();
        Self::new(
            format!("quadratic(k={k})"),
            move |x| {
                0.5 * k
                    * x.iter()
                        .zip(&center)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
            },
            move |x| x.iter().zip(&c2).map(|(a, b)| k * (a - b)).collect(),
        )
    }

    /// `psi(x) = sum_i sum_k a_k x_i^k`.
    pub fn separable_polynomial(coefficients: Vec<f64>) -> Self {
        let c2 = coefficients.clone();
        let p = move |t: f64| coefficients.iter().rev().fold(0.0, |acc, a| acc * t + a);
        let dp = move |t: f64| {
            c2.iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, a)| acc * t + k as f64 * a)
        };
        Self::new(
            "polynomial",
            move |x| x.iter().map(|&t| p(t)).sum(),
            move |x| x.iter().map(|&t| dp(t)).collect(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn psi(&self, x: &[f64]) -> f64 {
        (self.psi)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }

    /// Checks `psi >= 0` on the grid and returns the smallest `C` with
    /// `|grad psi| <= C (1 + psi)` at every node.
    pub fn check(&self, domain: &DiscreteDomain) -> DriftReport {
        let mut min_psi = f64::INFINITY;
        let mut c_psi: f64 = 0.0;
        for x in domain.nodes() {
            let p = self.psi(x);
            let g = crate::linalg::norm(&self.grad(x));
            min_psi = min_psi.min(p);
            c_psi = c_psi.max(g / (1.0 + p.max(0.0)));
        }
        DriftReport {
            min_psi,
            c_psi,
            nonnegative: min_psi >= 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftReport {
    pub min_psi: f64,
    pub c_psi: f64,
    pub nonnegative: bool,
}

/// `E(rho) = int rho log rho dVol_g` with `0 log 0 = 0`.
pub fn entropy(rho: &DiscreteDensity) -> f64 {
    rho.values()
        .iter()
        .zip(rho.domain().vol_weights())
        .filter(|(v, _)| **v > 0.0)
        .map(|(v, w)| w * v * v.ln())
        .sum()
}

/// `D(rho) = int psi rho dVol_g`.
pub fn drift(rho: &DiscreteDensity, psi: &DriftPotential) -> f64 {
    rho.integrate(|x| psi.psi(x))
}

/// `M(rho) = int d(x, x0)^2 rho dVol_g`.
pub fn second_moment(rho: &DiscreteDensity, x0: &[f64], metric: &dyn MetricModel) -> Result<f64> {
    let mut total = 0.0;
    for (x, m) in rho.domain().nodes().iter().zip(rho.masses()) {
        if m > 0.0 {
            total += m * metric.dist_sq(x, x0)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyBoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Compares `int (rho log rho)_-` with
/// `int e^{-d(x, x0)/2} + eps M(rho) + mass / (4 eps)`.
pub fn entropy_lower_bound_check(
    rho: &DiscreteDensity,
    eps: f64,
    x0: &[f64],
) -> Result<EntropyBoundReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let domain = rho.domain();
    let metric = domain.metric().as_ref();
    let mut lhs = 0.0;
    let mut tail = 0.0;
    for ((x, v), w) in domain
        .nodes()
        .iter()
        .zip(rho.values())
        .zip(domain.vol_weights())
    {
        if *v > 0.0 {
            lhs += w * (v * v.ln()).min(0.0).abs();
        }
        tail += w * (-0.5 * metric.dist_sq(x, x0)?.sqrt()).exp();
    }
    let rhs = tail + eps * second_moment(rho, x0, metric)? + rho.mass() / (4.0 * eps);
    Ok(EntropyBoundReport {
        lhs,
        rhs,
        holds: lhs <= rhs,
    })
}

/// Writes `x0[,x1],value` rows with a header.
pub fn write_density_csv<W: Write>(rho: &DiscreteDensity, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = rho.domain().dim();
    let mut header: Vec<String> = (0..dim).map(|a| format!("x{a}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    for (x, v) in rho.domain().nodes().iter().zip(rho.values()) {
        let mut row: Vec<String> = x.iter().map(|c| format!("{c:.17e}")).collect();
        row.push(format!("{v:.17e}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a density written by [`write_density_csv`] onto `domain`. Node
/// coordinates must match the grid to within a tenth of the spacing.
pub fn read_density_csv<R: Read>(
    domain: Arc<DiscreteDomain>,
    reader: R,
) -> Result<DiscreteDensity> {
    let mut r = csv::Reader::from_reader(reader);
    let dim = domain.dim();
    let mut values = Vec::with_capacity(domain.len());
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != dim + 1 {
            return Err(Error::InvalidInput(format!(
                "row {k} has {} columns",
                rec.len()
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("row {k}: {e}")))
        };
        if k >= domain.len() {
            return Err(Error::InvalidInput("more rows than grid nodes".into()));
        }
        for a in 0..dim {
            let c = parse(&rec[a])?;
            if (c - domain.node(k)[a]).abs() > 0.1 * domain.spacing()[a] {
                return Err(Error::InvalidInput(format!(
                    "row {k} is not at grid node {k}"
                )));
            }
        }
        values.push(parse(&rec[dim])?);
    }
    DiscreteDensity::new(domain, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ConstantMetric, EuclideanMetric};

    fn unit(n: usize) -> Arc<DiscreteDomain> {
        Arc::new(DiscreteDomain::interval(0.0, 1.0, n, Arc::new(EuclideanMetric::new(1))).unwrap())
    }

    #[test]
    fn grid_layout() {
        let b = BoxBounds::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let d = DiscreteDomain::new(b, &[4, 5], Arc::new(EuclideanMetric::new(2))).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.index(&[2, 3]), 13);
        assert_eq!(d.multi_index(13), vec![2, 3]);
        assert!((d.node(13)[0] - 0.625).abs() < 1e-15);
        assert!((d.node(13)[1] - 0.4).abs() < 1e-15);
        assert!((d.volume() - 2.0).abs() < 1e-14);
        assert_eq!(d.boundary_mask().iter().filter(|b| **b).count(), 14);
    }

    #[test]
    fn uniform_entropy_is_minus_log_volume() {
        assert!(entropy(&DiscreteDensity::uniform(unit(33))).abs() < 1e-15);
        let b = BoxBounds::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap();
        let d =
            Arc::new(DiscreteDomain::new(b, &[6, 7], Arc::new(EuclideanMetric::new(2))).unwrap());
        let e = entropy(&DiscreteDensity::uniform(d));
        assert!((e + 6f64.ln()).abs() < 1e-13);
        // A constant metric scales the volume.
        let d = Arc::new(
            DiscreteDomain::interval(
                0.0,
                1.0,
                8,
                Arc::new(ConstantMetric::scaled_identity(1, 4.0).unwrap()),
            )
            .unwrap(),
        );
        assert!((entropy(&DiscreteDensity::uniform(d)) + 2f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn gaussian_entropy() {
        let d = Arc::new(
            DiscreteDomain::interval(-5.0, 5.0, 256, Arc::new(EuclideanMetric::new(1))).unwrap(),
        );
        let rho = DiscreteDensity::from_fn(d, |x| (-0.5 * x[0] * x[0]).exp()).unwrap();
        let exact = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((entropy(&rho) - exact).abs() < 1e-3);
    }

    #[test]
    fn drift_and_moment_of_uniform() {
        let rho = DiscreteDensity::uniform(unit(128));
        assert_eq!(drift(&rho, &DriftPotential::zero()), 0.0);
        assert!((drift(&rho, &DriftPotential::constant(3.0)) - 3.0).abs() < 1e-14);
        let sq = DriftPotential::separable_polynomial(vec![0.0, 0.0, 1.0]);
        assert!((drift(&rho, &sq) - 1.0 / 3.0).abs() < 1e-4);
        let m = second_moment(&rho, &[0.0], &EuclideanMetric::new(1)).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn moment_of_a_point_mass_and_translation_bound() {
        let d = unit(64);
        let mut v = vec![0.0; 64];
        v[20] = 1.0;
        let rho = DiscreteDensity::new(d.clone(), v).unwrap();
        let x0 = d.node(20).to_vec();
        let metric = EuclideanMetric::new(1);
        assert!(second_moment(&rho, &x0, &metric).unwrap() <= d.spacing()[0].powi(2));
        let rho = DiscreteDensity::from_fn(d, |x| 1.0 + x[0]).unwrap();
        let (a, b) = ([0.2], [0.9]);
        let ma = second_moment(&rho, &a, &metric).unwrap();
        let mb = second_moment(&rho, &b, &metric).unwrap();
        assert!(mb <= 2.0 * ma + 2.0 * 0.49 + 1e-12);
    }

    #[test]
    fn entropy_bound_checks() {
        let r =
            entropy_lower_bound_check(&DiscreteDensity::uniform(unit(32)), 1.0, &[0.0]).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.holds);
        let d = Arc::new(
            DiscreteDomain::interval(-5.0, 5.0, 400, Arc::new(EuclideanMetric::new(1))).unwrap(),
        );
        let peaked =
            DiscreteDensity::from_fn(d.clone(), |x| (-x[0] * x[0] / (2.0 * 0.01)).exp()).unwrap();
        let wide = DiscreteDensity::from_fn(d, |x| (-x[0] * x[0] / 8.0).exp()).unwrap();
        for eps in [0.01, 0.1, 1.0] {
            assert!(
                entropy_lower_bound_check(&peaked, eps, &[0.0])
                    .unwrap()
                    .holds
            );
            let r = entropy_lower_bound_check(&wide, eps, &[0.0]).unwrap();
            assert!(r.holds && r.lhs > 0.0);
        }
    }

    #[test]
    fn normalization_and_clipping() {
        let rho = DiscreteDensity::new(unit(4), vec![-1e-18, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(rho.values()[0], 0.0);
        assert!((rho.mass() - 1.0).abs() < TOL_MASS);
        assert!(DiscreteDensity::new(unit(4), vec![0.0; 4]).is_err());
        assert!(DiscreteDensity::new(unit(4), vec![1.0; 3]).is_err());
        assert!(DiscreteDensity::new(unit(4), vec![f64::NAN, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = unit(10);
        let rho = DiscreteDensity::from_fn(d.clone(), |x| 1.0 + x[0] * x[0]).unwrap();
        let mut buf = Vec::new();
        write_density_csv(&rho, &mut buf).unwrap();
        let back = read_density_csv(d, buf.as_slice()).unwrap();
        assert!(rho.l1_distance(&back).unwrap() < 1e-15);
    }

    #[test]
    fn drift_report() {
        let d = unit(16);
        let r = DriftPotential::quadratic(vec![0.5], 2.0).check(&d);
        assert!(r.nonnegative && r.c_psi <= 1.0 + 1e-12);
        assert!(!DriftPotential::constant(-1.0).check(&d).nonnegative);
    }
}
