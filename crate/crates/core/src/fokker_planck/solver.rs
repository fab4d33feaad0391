use std::sync::Arc;

use crate::measures::{DiscreteDensity, DiscreteDomain, DriftPotential};
use crate::{Error, Result};

pub const TOL_MASS_IMPLICIT: f64 = 1e-12;
pub const TOL_MASS_EXPLICIT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeScheme {
    ImplicitEuler,
    ExplicitEuler,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdOptions {
    pub dt: f64,
    pub t_end: f64,
    pub beta_inv: f64,
    pub scheme: TimeScheme,
    /// Upwind instead of centered face densities in the drift flux.
    pub upwind: bool,
    /// Store every `store_every`-th step; the final time is always stored.
    pub store_every: usize,
}

impl FdOptions {
    pub fn new(dt: f64, t_end: f64) -> Self {
        Self {
            dt,
            t_end,
            beta_inv: 1.0,
            scheme: TimeScheme::ImplicitEuler,
            upwind: false,
            store_every: 1,
        }
    }
}

/// Stored states of a finite-volume solve.
#[derive(Debug, Clone)]
pub struct FdSolution {
    pub domain: Arc<DiscreteDomain>,
    pub times: Vec<f64>,
    pub densities: Vec<DiscreteDensity>,
    pub dt: f64,
    pub scheme: TimeScheme,
    /// Largest `|mass - 1|` seen before renormalization.
    pub max_mass_error: f64,
}

impl FdSolution {
    pub fn final_density(&self) -> &DiscreteDensity {
        self.densities
            .last()
            .expect("solution stores the initial state")
    }

    /// Stored state whose time is closest to `t`.
    pub fn nearest(&self, t: f64) -> &DiscreteDensity {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        &self.densities[k]
    }
}

/// Sparse generator `L` of the semi-discrete system `M d(rho)/dt = L rho`,
/// with `M = diag(vol_weights)`. Faces are listed once; boundary faces carry
/// no flux.
struct Operator {
    n: usize,
    /// `(i, j, c_i, c_j)`: the flux from `j` into `i` is `c_i rho_i + c_j rho_j`.
    faces: Vec<(usize, usize, f64, f64)>,
}

impl Operator {
    fn build(
        domain: &DiscreteDomain,
        psi: &DriftPotential,
        beta_inv: f64,
        upwind: bool,
    ) -> Result<Self> {
        let n = domain.len();
        let dim = domain.dim();
        let h = domain.spacing();
        let cell = domain.cell_volume();
        let ginv: Vec<nalgebra::DMatrix<f64>> = (0..n)
            .map(|k| {
                domain
                    .metric_at(k)
                    .clone()
                    .try_inverse()
                    .ok_or(Error::SingularMetric {
                        min_eigenvalue: 0.0,
                    })
            })
            .collect::<Result<_>>()?;
        if dim == 2 {
            let cross = ginv.iter().map(|m| m[(0, 1)].abs()).fold(0.0, f64::max);
            if cross > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "finite-volume solver needs a diagonal metric in 2D (|g^12| = {cross:e})"
                )));
            }
        }
        let sqrt_g: Vec<f64> = domain.vol_weights().iter().map(|w| w / cell).collect();
        let psi_n: Vec<f64> = domain.nodes().iter().map(|x| psi.psi(x)).collect();
        let mut faces = Vec::new();
        for i in 0..n {
            let idx = domain.multi_index(i);
            for a in 0..dim {
                if idx[a] + 1 == domain.shape()[a] {
                    continue;
                }
                let mut jdx = idx.clone();
                jdx[a] += 1;
                let j = domain.index(&jdx);
                let k_face = 0.5 * (sqrt_g[i] * ginv[i][(a, a)] + sqrt_g[j] * ginv[j][(a, a)]);
                let dpsi = (psi_n[j] - psi_n[i]) / h[a];
                let (wi, wj) = if upwind {
                    if dpsi > 0.0 {
                        (0.0, 1.0)
                    } else {
                        (1.0, 0.0)
                    }
                } else {
                    (0.5, 0.5)
                };
                let s = cell / h[a];
                let ci = s * k_face * (-beta_inv / h[a] + wi * dpsi);
                let cj = s * k_face * (beta_inv / h[a] + wj * dpsi);
                faces.push((i, j, ci, cj));
            }
        }
        Ok(Self { n, faces })
    }

    fn apply(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, j, ci, cj) in &self.faces {
            let flux = ci * rho[i] + cj * rho[j];
            out[i] += flux;
            out[j] -= flux;
        }
        out
    }

    /// Largest step keeping explicit Euler positivity-preserving: `min M_i / (-L_ii)`.
    fn explicit_limit(&self, m: &[f64]) -> f64 {
        let mut diag = vec![0.0; self.n];
        for &(i, j, ci, cj) in &self.faces {
            diag[i] += ci;
            diag[j] -= cj;
        }
        let rate = diag
            .iter()
            .zip(m)
            .map(|(d, mi)| (-d / mi).max(0.0))
            .fold(0.0, f64::max);
        if rate > 0.0 {
            1.0 / rate
        } else {
            f64::INFINITY
        }
    }

    /// Banded matrix `M - dt L` with half bandwidth `bw` (row-major band storage).
    fn implicit_matrix(&self, m: &[f64], dt: f64, bw: usize) -> Banded {
        let mut a = Banded::zeros(self.n, bw);
        for i in 0..self.n {
            *a.at(i, i) += m[i];
        }
        for &(i, j, ci, cj) in &self.faces {
            *a.at(i, i) -= dt * ci;
            *a.at(i, j) -= dt * cj;
            *a.at(j, i) += dt * ci;
            *a.at(j, j) += dt * cj;
        }
        a
    }
}

/// Band matrix with LU factorization without pivoting. The implicit matrix
/// is an M-matrix-like perturbation of a positive diagonal, so elimination
/// without pivoting is stable.
struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * (2 * self.bw + 1) + (j + self.bw - i)]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (2 * self.bw + 1) + (j + self.bw - i)]
    }

    fn factor(&mut self) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        for k in 0..n {
            let pivot = self.get(k, k);
            if !(pivot.abs() > 0.0) {
                return Err(Error::NoConvergence {
                    what: "banded LU",
                    iterations: k,
                    residual: pivot,
                });
            }
            for i in k + 1..(k + bw + 1).min(n) {
                let l = self.get(i, k) / pivot;
                if l == 0.0 {
                    continue;
                }
                *self.at(i, k) = l;
                for j in k + 1..(k + bw + 1).min(n) {
                    let u = self.get(k, j);
                    *self.at(i, j) -= l * u;
                }
            }
        }
        Ok(())
    }

    fn solve(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let s: f64 = (lo..i).map(|j| self.get(i, j) * b[j]).sum();
            b[i] -= s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let s: f64 = (i + 1..hi).map(|j| self.get(i, j) * b[j]).sum();
            b[i] = (b[i] - s) / self.get(i, i);
        }
    }
}

/// Finite-volume solve of
/// `d_t rho = beta^{-1} Delta_g rho + div_g(rho grad_g psi)`
/// with no-flux boundary faces on the density's grid and metric.
pub fn fd_solve(
    rho0: &DiscreteDensity,
    psi: &DriftPotential,
    opts: &FdOptions,
) -> Result<FdSolution> {
    if !(opts.dt > 0.0) || !(opts.t_end > 0.0) || !(opts.beta_inv > 0.0) {
        return Err(Error::InvalidInput(
            "dt, t_end and beta_inv must be positive".into(),
        ));
    }
    let domain = rho0.domain().clone();
    let op = Operator::build(&domain, psi, opts.beta_inv, opts.upwind)?;
    let m = domain.vol_weights().to_vec();
    let n_steps = (opts.t_end / opts.dt).round().max(1.0) as usize;
    let dt = opts.t_end / n_steps as f64;
    let tol = match opts.scheme {
        TimeScheme::ImplicitEuler => TOL_MASS_IMPLICIT,
        TimeScheme::ExplicitEuler => TOL_MASS_EXPLICIT,
    };
    let factor = match opts.scheme {
        TimeScheme::ImplicitEuler => {
            let bw = if domain.dim() == 1 {
                1
            } else {
                domain.shape()[1]
            };
            let mut a = op.implicit_matrix(&m, dt, bw);
            a.factor()?;
            Some(a)
        }
        TimeScheme::ExplicitEuler => {
            let limit = op
                .explicit_limit(&m)
                .min(explicit_diffusive_limit(&domain, opts.beta_inv));
            if dt > limit {
                return Err(Error::StabilityViolation { dt, limit });
            }
            None
        }
    };
    let mut rho = rho0.values().to_vec();
    let mut times = vec![0.0];
    let mut densities = vec![rho0.clone()];
    let mut max_mass_error: f64 = 0.0;
    let store_every = opts.store_every.max(1);
    for step in 1..=n_steps {
        match &factor {
            Some(a) => {
                let mut b: Vec<f64> = rho.iter().zip(&m).map(|(r, mi)| r * mi).collect();
                a.solve(&mut b);
                rho = b;
            }
            None => {
                let l = op.apply(&rho);
                for ((r, li), mi) in rho.iter_mut().zip(&l).zip(&m) {
                    *r += dt * li / mi;
                }
            }
        }
        let min = rho.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -tol {
            return Err(Error::NegativeDensity { min });
        }
        let mass: f64 = rho.iter().zip(&m).map(|(r, mi)| r * mi).sum();
        max_mass_error = max_mass_error.max((mass - 1.0).abs());
        if step % store_every == 0 || step == n_steps {
            times.push(step as f64 * dt);
            densities.push(DiscreteDensity::new(domain.clone(), rho.clone())?);
        }
    }
    Ok(FdSolution {
        domain,
        times,
        densities,
        dt,
        scheme: opts.scheme,
        max_mass_error,
    })
}

/// `dt <= 1/2 min h^2 / max diffusivity`, with diffusivity
/// `beta^{-1} max_a g^{aa}` summed over axes.
fn explicit_diffusive_limit(domain: &DiscreteDomain, beta_inv: f64) -> f64 {
    let h = domain.spacing();
    let mut worst: f64 = 0.0;
    for k in 0..domain.len() {
        let ginv = domain
            .metric_at(k)
            .clone()
            .try_inverse()
            .unwrap_or_else(|| domain.metric_at(k).clone());
        let rate: f64 = (0..domain.dim())
            .map(|a| beta_inv * ginv[(a, a)] / (h[a] * h[a]))
            .sum();
        worst = worst.max(rate);
    }
    0.5 / worst
}

/// Mean and variance at time `t` of the Ornstein-Uhlenbeck flow with
/// `psi = |x|^2 / 2`, `beta = 1`, started from a Gaussian.
pub fn ou_analytic(mean: f64, variance: f64, t: f64) -> Result<(f64, f64)> {
    if !(variance > 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidInput(
            "variance must be positive and t nonnegative".into(),
        ));
    }
    let e = (-t).exp();
    Ok((mean * e, variance * e * e + 1.0 - e * e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoxBounds, ConstantMetric, EuclideanMetric};
    use std::f64::consts::PI;

    fn unit(n: usize) -> Arc<DiscreteDomain> {
        Arc::new(DiscreteDomain::interval(0.0, 1.0, n, Arc::new(EuclideanMetric::new(1))).unwrap())
    }

    fn cosine_error(n: usize, dt: f64) -> f64 {
        let d = unit(n);
        let rho0 = DiscreteDensity::from_fn(d.clone(), |x| 1.0 + 0.5 * (PI * x[0]).cos()).unwrap();
        let mut opts = FdOptions::new(dt, 0.1);
        opts.store_every = usize::MAX;
        let sol = fd_solve(&rho0, &DriftPotential::zero(), &opts).unwrap();
        let decay = (-PI * PI * 0.1).exp();
        sol.final_density()
            .values()
            .iter()
            .zip(d.nodes())
            .map(|(v, x)| (v - (1.0 + 0.5 * decay * (PI * x[0]).cos())).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn uniform_is_stationary() {
        let d = unit(32);
        let u = DiscreteDensity::uniform(d);
        let sol = fd_solve(&u, &DriftPotential::zero(), &FdOptions::new(1e-3, 0.1)).unwrap();
        assert!(sol.final_density().l1_distance(&u).unwrap() < 1e-13);
    }

    #[test]
    fn cosine_benchmark_and_spatial_order() {
        assert!(cosine_error(256, 1e-5) < 1e-3);
        let e1 = cosine_error(32, 1e-6);
        let e2 = cosine_error(64, 1e-6);
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn mass_and_positivity() {
        let d = unit(50);
        let rho0 = DiscreteDensity::from_fn(d, |x| if x[0] < 0.3 { 1.0 } else { 0.0 }).unwrap();
        let psi = DriftPotential::quadratic(vec![0.8], 30.0);
        for upwind in [false, true] {
            let mut opts = FdOptions::new(1e-3, 0.2);
            opts.upwind = upwind;
            let sol = fd_solve(&rho0, &psi, &opts).unwrap();
            assert!(sol.max_mass_error < TOL_MASS_IMPLICIT);
            assert!(sol
                .densities
                .iter()
                .all(|r| r.values().iter().all(|v| *v >= 0.0)));
        }
    }

    #[test]
    fn explicit_scheme_matches_and_checks_stability() {
        let d = unit(32);
        let rho0 = DiscreteDensity::from_fn(d, |x| 1.0 + 0.5 * (PI * x[0]).cos()).unwrap();
        let mut opts = FdOptions::new(1e-3, 0.05);
        opts.scheme = TimeScheme::ExplicitEuler;
        assert!(matches!(
            fd_solve(&rho0, &DriftPotential::zero(), &opts),
            Err(Error::StabilityViolation { .. })
        ));
        opts.dt = 1e-5;
        let ex = fd_solve(&rho0, &DriftPotential::zero(), &opts).unwrap();
        opts.scheme = TimeScheme::ImplicitEuler;
        let im = fd_solve(&rho0, &DriftPotential::zero(), &opts).unwrap();
        assert!(ex.final_density().l1_distance(im.final_density()).unwrap() < 1e-4);
        assert!(ex.max_mass_error < TOL_MASS_EXPLICIT);
    }

    #[test]
    fn ou_stationary_limit() {
        let d = Arc::new(
            DiscreteDomain::interval(-8.0, 8.0, 200, Arc::new(EuclideanMetric::new(1))).unwrap(),
        );
        let rho0 =
            DiscreteDensity::from_fn(d.clone(), |x| (-(x[0] - 1.0).powi(2) / 0.5).exp()).unwrap();
        let mut opts = FdOptions::new(1e-2, 10.0);
        opts.store_every = usize::MAX;
        let sol = fd_solve(&rho0, &DriftPotential::quadratic(vec![0.0], 1.0), &opts).unwrap();
        let gauss = DiscreteDensity::from_fn(d, |x| (-0.5 * x[0] * x[0]).exp()).unwrap();
        assert!(sol.final_density().l1_distance(&gauss).unwrap() < 1e-3);
    }

    #[test]
    fn ou_closed_form() {
        assert_eq!(ou_analytic(1.0, 0.25, 0.0).unwrap(), (1.0, 0.25));
        let (m, v) = ou_analytic(1.0, 0.25, 1.0).unwrap();
        assert!((m - 0.3679).abs() < 1e-4 && (v - 0.8984).abs() < 1e-4);
        let (m, v) = ou_analytic(3.0, 0.1, 50.0).unwrap();
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        assert!(ou_analytic(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn constant_metric_rescales_time() {
        let c = 4.0;
        let flat = unit(40);
        let scaled = Arc::new(
            DiscreteDomain::interval(
                0.0,
                1.0,
                40,
                Arc::new(ConstantMetric::scaled_identity(1, c).unwrap()),
            )
            .unwrap(),
        );
        let f = |x: &[f64]| 1.0 + 0.5 * (PI * x[0]).cos();
        let a = fd_solve(
            &DiscreteDensity::from_fn(flat, f).unwrap(),
            &DriftPotential::zero(),
            &FdOptions::new(1e-4, 0.05),
        )
        .unwrap();
        let b = fd_solve(
            &DiscreteDensity::from_fn(scaled, f).unwrap(),
            &DriftPotential::zero(),
            &FdOptions::new(4e-4, 0.2),
        )
        .unwrap();
        for (x, y) in a
            .final_density()
            .values()
            .iter()
            .zip(b.final_density().values())
        {
            // Densities differ by the constant volume factor sqrt(c) = 2.
            assert!((x - 2.0 * y).abs() < 1e-10);
        }
    }

    #[test]
    fn two_dimensional_solve_conserves_mass() {
        let b = BoxBounds::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let d =
            Arc::new(DiscreteDomain::new(b, &[12, 10], Arc::new(EuclideanMetric::new(2))).unwrap());
        let rho0 = DiscreteDensity::from_fn(d.clone(), |x| {
            (-(x[0] - 0.2).powi(2) - (x[1] - 1.5).powi(2)).exp()
        })
        .unwrap();
        let sol = fd_solve(
            &rho0,
            &DriftPotential::quadratic(vec![0.5, 0.5], 2.0),
            &FdOptions::new(1e-3, 0.1),
        )
        .unwrap();
        assert!(sol.max_mass_error < TOL_MASS_IMPLICIT);
        // Separable product solution: cosine modes along each axis.
        let f = |x: &[f64]| 1.0 + 0.3 * (PI * x[0]).cos() * (PI * x[1] / 2.0).cos();
        let rho0 = DiscreteDensity::from_fn(d.clone(), f).unwrap();
        let sol = fd_solve(&rho0, &DriftPotential::zero(), &FdOptions::new(1e-5, 0.02)).unwrap();
        let decay = (-(PI * PI + PI * PI / 4.0) * 0.02).exp();
        let exact = DiscreteDensity::from_fn(d, |x| {
            1.0 + 0.3 * decay * (PI * x[0]).cos() * (PI * x[1] / 2.0).cos()
        })
        .unwrap();
        assert!(sol.final_density().l1_distance(&exact).unwrap() < 5e-3);
    }
}
