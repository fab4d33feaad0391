use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::cost::CostFunction;
use super::potential::ConvexPotential;
use crate::linalg;
use crate::{Error, Result};

/// How `dist_sq` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    /// Closed form.
    Exact,
    /// One-dimensional arc-length quadrature (accurate to ~1e-12).
    Quadrature,
    /// Numeric geodesic shooting; approximate.
    Shooting,
}

impl DistanceKind {
    pub fn is_approximate(self) -> bool {
        matches!(self, DistanceKind::Shooting)
    }
}

/// A Riemannian metric in a global chart.
pub trait MetricModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn name(&self) -> String;

    /// `g_ij(x)`, symmetric positive definite.
    fn tensor(&self, x: &[f64]) -> Result<DMatrix<f64>>;

    /// Squared Riemannian distance.
    fn dist_sq(&self, x: &[f64], y: &[f64]) -> Result<f64>;

    fn distance_kind(&self) -> DistanceKind;

    /// Whether `g` is the same matrix at every point.
    fn is_constant(&self) -> bool {
        false
    }

    /// `sqrt(det g(x))`, the Riemannian volume density in coordinates.
    fn volume_density(&self, x: &[f64]) -> Result<f64> {
        let g = self.tensor(x)?;
        let det = g.determinant();
        if !(det > 0.0) {
            return Err(Error::SingularMetric {
                min_eigenvalue: linalg::min_eigenvalue(&g),
            });
        }
        Ok(det.sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct EuclideanMetric {
    dim: usize,
}

impl EuclideanMetric {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl MetricModel for EuclideanMetric {
    fn dim(&self) -> usize {
        self.dim
    }

    fn name(&self) -> String {
        "euclidean".into()
    }

    fn tensor(&self, _x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.dim, self.dim))
    }

    fn dist_sq(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    fn distance_kind(&self) -> DistanceKind {
        DistanceKind::Exact
    }

    fn is_constant(&self) -> bool {
        true
    }

    fn volume_density(&self, _x: &[f64]) -> Result<f64> {
        Ok(1.0)
    }
}

/// A constant SPD metric `G`; `d^2(x, y) = (x - y)^T G (x - y)`.
#[derive(Debug, Clone)]
pub struct ConstantMetric {
    matrix: DMatrix<f64>,
}

impl ConstantMetric {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidInput("metric matrix must be square".into()));
        }
        let min = linalg::min_eigenvalue(&matrix);
        if min <= 0.0 || linalg::max_asymmetry(&matrix) > 1e-12 {
            return Err(Error::SingularMetric {
                min_eigenvalue: min,
            });
        }
        Ok(Self { matrix })
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim) * scale)
    }
}

impl MetricModel for ConstantMetric {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn name(&self) -> String {
        "constant".into()
    }

    fn tensor(&self, _x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.matrix.clone())
    }

    fn dist_sq(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let d = DVector::from_vec(linalg::sub(x, y));
        Ok(d.dot(&(&self.matrix * &d)))
    }

    fn distance_kind(&self) -> DistanceKind {
        DistanceKind::Exact
    }

    fn is_constant(&self) -> bool {
        true
    }
}

/// Hessian metric `g = D^2 phi`.
#[derive(Debug, Clone)]
pub struct HessianMetric {
    potential: Arc<dyn ConvexPotential>,
}

impl HessianMetric {
    pub fn new(potential: Arc<dyn ConvexPotential>) -> Self {
        Self { potential }
    }
}

impl MetricModel for HessianMetric {
    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn name(&self) -> String {
        format!("hessian:{}", self.potential.name())
    }

    fn tensor(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.potential.hessian(x)
    }

    fn dist_sq(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        riemannian_dist_sq(&|z: &[f64]| self.tensor(z), x, y)
    }

    fn distance_kind(&self) -> DistanceKind {
        if self.dim() == 1 {
            DistanceKind::Quadrature
        } else {
            DistanceKind::Shooting
        }
    }
}

/// The metric `-c_{x,y}(x, x)` induced by a cost.
#[derive(Debug, Clone)]
pub struct InducedMetric {
    cost: Arc<dyn CostFunction>,
}

impl InducedMetric {
    pub fn new(cost: Arc<dyn CostFunction>) -> Self {
        Self { cost }
    }
}

impl MetricModel for InducedMetric {
    fn dim(&self) -> usize {
        self.cost.dim()
    }

    fn name(&self) -> String {
        format!("induced:{}", self.cost.name())
    }

    fn tensor(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        super::induced_metric(self.cost.as_ref(), x)
    }

    fn dist_sq(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        riemannian_dist_sq(&|z: &[f64]| self.tensor(z), x, y)
    }

    fn distance_kind(&self) -> DistanceKind {
        if self.dim() == 1 {
            DistanceKind::Quadrature
        } else {
            DistanceKind::Shooting
        }
    }
}

type TensorFn<'a> = dyn Fn(&[f64]) -> Result<DMatrix<f64>> + 'a;

/// Squared geodesic distance for a metric given pointwise.
///
/// In one dimension this is `(int_x^y sqrt(g))^2` by Gauss-Legendre
/// quadrature; otherwise geodesic shooting with RK4 and Newton on the
/// initial velocity (tolerance 1e-8).
pub fn riemannian_dist_sq(tensor: &TensorFn<'_>, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() == 1 {
        let len = arc_length_1d(tensor, x[0], y[0])?;
        return Ok(len * len);
    }
    let v = shoot(tensor, x, y)?;
    let g = tensor(x)?;
    let v = DVector::from_vec(v);
    Ok(v.dot(&(g * &v)))
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

fn arc_length_1d(tensor: &TensorFn<'_>, a: f64, b: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let panels = 32;
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (node, w) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            let s = mid + 0.5 * h * node;
            let g = tensor(&[s])?[(0, 0)];
            if !(g > 0.0) {
                return Err(Error::SingularMetric { min_eigenvalue: g });
            }
            total += w * 0.5 * h * g.sqrt();
        }
    }
    Ok(total.abs())
}

/// Christoffel symbols `gamma[k][i][j]` by finite differences of the metric.
fn christoffel(tensor: &TensorFn<'_>, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let d = x.len();
    let g = tensor(x)?;
    let ginv = g.clone().try_inverse().ok_or(Error::SingularMetric {
        min_eigenvalue: 0.0,
    })?;
    let mut dg = Vec::with_capacity(d);
    let mut probe = x.to_vec();
    for l in 0..d {
        let h = linalg::fd_step(x[l]);
        probe[l] = x[l] + h;
        let gp = tensor(&probe)?;
        probe[l] = x[l] - h;
        let gm = tensor(&probe)?;
        probe[l] = x[l];
        dg.push((gp - gm) / (2.0 * h));
    }
    let mut gamma = vec![DMatrix::zeros(d, d); d];
    for k in 0..d {
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for l in 0..d {
                    s += ginv[(k, l)] * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                }
                gamma[k][(i, j)] = 0.5 * s;
            }
        }
    }
    Ok(gamma)
}

fn geodesic_rhs(tensor: &TensorFn<'_>, state: &[f64]) -> Result<Vec<f64>> {
    let d = state.len() / 2;
    let (x, v) = state.split_at(d);
    let gamma = christoffel(tensor, x)?;
    let mut out = v.to_vec();
    for k in 0..d {
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += gamma[k][(i, j)] * v[i] * v[j];
            }
        }
        out.push(-acc);
    }
    Ok(out)
}

/// Endpoint of the geodesic with initial point `x` and velocity `v` at time 1.
pub fn exponential_map(tensor: &TensorFn<'_>, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    const STEPS: usize = 200;
    let h = 1.0 / STEPS as f64;
    let mut state: Vec<f64> = x.iter().chain(v).copied().collect();
    let axpy = |s: &[f64], k: &[f64], a: f64| -> Vec<f64> {
        s.iter().zip(k).map(|(si, ki)| si + a * ki).collect()
    };
    for _ in 0..STEPS {
        let k1 = geodesic_rhs(tensor, &state)?;
        let k2 = geodesic_rhs(tensor, &axpy(&state, &k1, 0.5 * h))?;
        let k3 = geodesic_rhs(tensor, &axpy(&state, &k2, 0.5 * h))?;
        let k4 = geodesic_rhs(tensor, &axpy(&state, &k3, h))?;
        for i in 0..state.len() {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if state.iter().any(|s| !s.is_finite()) {
            return Err(Error::OutOfDomain("geodesic blew up".into()));
        }
    }
    state.truncate(x.len());
    Ok(state)
}

fn shoot(tensor: &TensorFn<'_>, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    const TOL: f64 = 1e-8;
    const MAX_ITERS: usize = 30;
    let d = x.len();
    let mut v = linalg::sub(y, x);
    let residual_of =
        |v: &[f64]| -> Result<Vec<f64>> { Ok(linalg::sub(&exponential_map(tensor, x, v)?, y)) };
    let mut r = residual_of(&v)?;
    let mut rn = linalg::norm(&r);
    for _ in 0..MAX_ITERS {
        if rn < TOL {
            return Ok(v);
        }
        let jac = linalg::fd_jacobian(|w| exponential_map(tensor, x, w), &v, d)?;
        let neg: Vec<f64> = r.iter().map(|e| -e).collect();
        let step = linalg::solve(&jac, &neg).ok_or(Error::NoConvergence {
            what: "geodesic shooting",
            iterations: 0,
            residual: rn,
        })?;
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = v.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            if let Ok(rt) = residual_of(&trial) {
                let rtn = linalg::norm(&rt);
                if rtn < rn {
                    v = trial;
                    r = rt;
                    rn = rtn;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-6 {
                return Err(Error::NoConvergence {
                    what: "geodesic shooting",
                    iterations: MAX_ITERS,
                    residual: rn,
                });
            }
        }
    }
    if rn < TOL {
        Ok(v)
    } else {
        Err(Error::NoConvergence {
            what: "geodesic shooting",
            iterations: MAX_ITERS,
            residual: rn,
        })
    }
}
