use std::sync::Arc;

use super::FdSolution;
use crate::geometry::BoxBounds;
use crate::jko::FlowTrajectory;
use crate::measures::{DiscreteDensity, DriftPotential};
use crate::{Error, Result};

const TOL_NEUMANN: f64 = 1e-8;

type Scalar = dyn Fn(&[f64]) -> f64 + Send + Sync;
type Vector = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Spatial test function with its coordinate gradient.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    value: Arc<Scalar>,
    grad: Arc<Vector>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .finish()
    }
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            grad: Arc::new(grad),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }
}

/// Smooth time cutoff `eta(t) = exp(1 - 1 / (1 - (t/T)^2))` on `[0, T)`,
/// zero afterwards; `eta(0) = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeProfile {
    pub support: f64,
}

impl TimeProfile {
    pub fn new(support: f64) -> Result<Self> {
        if !(support > 0.0) {
            return Err(Error::InvalidInput(
                "time profile support must be positive".into(),
            ));
        }
        Ok(Self { support })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let r = t / self.support;
        if r.abs() >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - r * r)).exp()
        }
    }
}

/// Neumann-compatible dictionary of eight functions on a box. With
/// `s = (x - a) / (b - a)` and the smoothstep `S(s) = s^2 (3 - 2 s)`:
/// 1D `{1, S, S^2, cos(pi s), cos(2 pi s), cos(3 pi s), S cos(pi s), cos(4 pi s)}`,
/// 2D `{1, S1, S2, S1 S2, S1^2, S2^2, cos(pi s1), cos(pi s2)}`.
pub fn neumann_dictionary(bounds: &BoxBounds) -> Vec<TestFunction> {
    type Profile = (f64, f64);
    let pi = std::f64::consts::PI;
    let smooth = |s: f64| -> Profile { (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s)) };
    let square = move |s: f64| -> Profile {
        let (v, d) = smooth(s);
        (v * v, 2.0 * v * d)
    };
    let cosine = move |k: f64| {
        move |s: f64| -> Profile { ((k * pi * s).cos(), -k * pi * (k * pi * s).sin()) }
    };
    let mixed = move |s: f64| -> Profile {
        let (v, d) = smooth(s);
        let (c, dc) = ((pi * s).cos(), -pi * (pi * s).sin());
        (v * c, d * c + v * dc)
    };
    let one = |_s: f64| -> Profile { (1.0, 0.0) };

    let lo = bounds.lower.clone();
    let width: Vec<f64> = bounds
        .upper
        .iter()
        .zip(&bounds.lower)
        .map(|(u, l)| u - l)
        .collect();
    // Product of per-axis profiles.
    let product = |name: &str, factors: Vec<Arc<dyn Fn(f64) -> Profile + Send + Sync>>| {
        let (lo2, w2, f2) = (lo.clone(), width.clone(), factors.clone());
        let (lo3, w3) = (lo.clone(), width.clone());
        TestFunction::new(
            name,
            move |x: &[f64]| {
                (0..x.len())
                    .map(|a| f2[a]((x[a] - lo2[a]) / w2[a]).0)
                    .product()
            },
            move |x: &[f64]| {
                let parts: Vec<Profile> = (0..x.len())
                    .map(|a| factors[a]((x[a] - lo3[a]) / w3[a]))
                    .collect();
                (0..x.len())
                    .map(|a| {
                        let mut g = parts[a].1 / w3[a];
                        for (b, p) in parts.iter().enumerate() {
                            if b != a {
                                g *= p.0;
                            }
                        }
                        g
                    })
                    .collect()
            },
        )
    };
    macro_rules! f {
        ($e:expr) => {
            Arc::new($e) as Arc<dyn Fn(f64) -> Profile + Send + Sync>
        };
    }
    if bounds.dim() == 1 {
        vec![
            product("1", vec![f!(one)]),
            product("S", vec![f!(smooth)]),
            product("S^2", vec![f!(square)]),
            product("cos(pi s)", vec![f!(cosine(1.0))]),
            product("cos(2 pi s)", vec![f!(cosine(2.0))]),
            product("cos(3 pi s)", vec![f!(cosine(3.0))]),
            product("S cos(pi s)", vec![f!(mixed)]),
            product("cos(4 pi s)", vec![f!(cosine(4.0))]),
        ]
    } else {
        vec![
            product("1", vec![f!(one), f!(one)]),
            product("S1", vec![f!(smooth), f!(one)]),
            product("S2", vec![f!(one), f!(smooth)]),
            product("S1 S2", vec![f!(smooth), f!(smooth)]),
            product("S1^2", vec![f!(square), f!(one)]),
            product("S2^2", vec![f!(one), f!(square)]),
            product("cos(pi s1)", vec![f!(cosine(1.0)), f!(one)]),
            product("cos(pi s2)", vec![f!(one), f!(cosine(1.0))]),
        ]
    }
}

/// A time-indexed family of densities on one grid, read as the
/// piecewise-constant curve equal to `rho_k` on `(t_{k-1}, t_k]`.
pub trait DensityPath {
    fn samples(&self) -> Vec<(f64, &DiscreteDensity)>;
}

impl DensityPath for FlowTrajectory {
    fn samples(&self) -> Vec<(f64, &DiscreteDensity)> {
        self.times().into_iter().zip(self.steps.iter()).collect()
    }
}

impl DensityPath for FdSolution {
    fn samples(&self) -> Vec<(f64, &DiscreteDensity)> {
        self.times
            .iter()
            .copied()
            .zip(self.densities.iter())
            .collect()
    }
}

impl DensityPath for [(f64, DiscreteDensity)] {
    fn samples(&self) -> Vec<(f64, &DiscreteDensity)> {
        self.iter().map(|(t, d)| (*t, d)).collect()
    }
}

/// Weak-form residual of `d_t rho = beta^{-1} Delta_g rho + div_g(rho grad_g psi)`:
///
/// `| eta(0) int zeta rho_0 + int int zeta eta' rho + int int (beta^{-1} Delta_g zeta - <grad psi, grad zeta>_g) eta rho |`
///
/// over the piecewise-constant interpolant: the `eta'` term is integrated
/// exactly on each interval and the last term by the midpoint rule.
pub fn weak_residual<P: DensityPath + ?Sized>(
    path: &P,
    zeta: &TestFunction,
    eta: &TimeProfile,
    psi: &DriftPotential,
    beta_inv: f64,
) -> Result<f64> {
    let samples = path.samples();
    let Some(&(t0, rho0)) = samples.first() else {
        return Err(Error::InvalidInput("empty density path".into()));
    };
    let t_last = samples.last().map(|s| s.0).unwrap_or(t0);
    if eta.support > t_last - t0 + 1e-12 {
        return Err(Error::InvalidInput(format!(
            "time profile support {} exceeds the path length {}",
            eta.support,
            t_last - t0
        )));
    }
    let domain = rho0.domain().clone();
    check_neumann(zeta, domain.as_ref())?;
    let zeta_n: Vec<f64> = domain.nodes().iter().map(|x| zeta.value(x)).collect();
    let gen_n = generator_values(zeta, psi, beta_inv, domain.as_ref())?;
    let mut total = eta.eval(0.0)
        * domain.integrate(
            &zeta_n
                .iter()
                .zip(rho0.values())
                .map(|(z, r)| z * r)
                .collect::<Vec<_>>(),
        );
    for w in samples.windows(2) {
        let (ta, tb) = (w[0].0 - t0, w[1].0 - t0);
        let rho = w[1].1;
        let masses = rho.masses();
        let int_zeta: f64 = masses.iter().zip(&zeta_n).map(|(m, z)| m * z).sum();
        let int_gen: f64 = masses.iter().zip(&gen_n).map(|(m, z)| m * z).sum();
        total += (eta.eval(tb) - eta.eval(ta)) * int_zeta;
        total += (tb - ta) * eta.eval(0.5 * (ta + tb)) * int_gen;
    }
    Ok(total.abs())
}

/// Largest weak residual over a dictionary.
pub fn weak_residual_max<P: DensityPath + ?Sized>(
    path: &P,
    dictionary: &[TestFunction],
    eta: &TimeProfile,
    psi: &DriftPotential,
    beta_inv: f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for z in dictionary {
        worst = worst.max(weak_residual(path, z, eta, psi, beta_inv)?);
    }
    Ok(worst)
}

/// `beta^{-1} Delta_g zeta - <grad psi, grad zeta>_g` at the nodes.
/// The Laplace-Beltrami operator is a centered difference of the flux
/// `sqrt(g) g^{-1} grad zeta` built from the analytic gradient.
fn generator_values(
    zeta: &TestFunction,
    psi: &DriftPotential,
    beta_inv: f64,
    domain: &crate::measures::DiscreteDomain,
) -> Result<Vec<f64>> {
    let metric = domain.metric();
    let dim = domain.dim();
    let b = domain.bounds();
    let flux = |x: &[f64]| -> Result<Vec<f64>> {
        let g = metric.tensor(x)?;
        let ginv = g.clone().try_inverse().ok_or(Error::SingularMetric {
            min_eigenvalue: 0.0,
        })?;
        let sg = g.determinant().sqrt();
        let dz = zeta.grad(x);
        Ok((0..dim)
            .map(|a| sg * (0..dim).map(|c| ginv[(a, c)] * dz[c]).sum::<f64>())
            .collect())
    };
    let mut out = Vec::with_capacity(domain.len());
    for (k, x) in domain.nodes().iter().enumerate() {
        let mut div = 0.0;
        for a in 0..dim {
            let delta = 1e-4 * (b.upper[a] - b.lower[a]);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += delta;
            xm[a] -= delta;
            div += (flux(&xp)?[a] - flux(&xm)?[a]) / (2.0 * delta);
        }
        let g = domain.metric_at(k);
        let ginv = g.clone().try_inverse().ok_or(Error::SingularMetric {
            min_eigenvalue: 0.0,
        })?;
        let sg = g.determinant().sqrt();
        let dz = zeta.grad(x);
        let dp = psi.grad(x);
        let inner: f64 = (0..dim)
            .map(|a| (0..dim).map(|c| dp[a] * ginv[(a, c)] * dz[c]).sum::<f64>())
            .sum();
        out.push(beta_inv * div / sg - inner);
    }
    Ok(out)
}

/// `(g^{-1} grad zeta)` must have zero normal component on the box faces.
fn check_neumann(zeta: &TestFunction, domain: &crate::measures::DiscreteDomain) -> Result<()> {
    let b = domain.bounds();
    for (k, x) in domain.nodes().iter().enumerate() {
        if !domain.boundary_mask()[k] {
            continue;
        }
        let idx = domain.multi_index(k);
        for a in 0..domain.dim() {
            for (at_face, face) in [
                (idx[a] == 0, b.lower[a]),
                (idx[a] + 1 == domain.shape()[a], b.upper[a]),
            ] {
                if !at_face {
                    continue;
                }
                let mut p = x.clone();
                p[a] = face;
                let g = domain.metric().tensor(&p)?;
                let ginv = g.try_inverse().ok_or(Error::SingularMetric {
                    min_eigenvalue: 0.0,
                })?;
                let dz = zeta.grad(&p);
                let normal: f64 = (0..domain.dim()).map(|c| ginv[(a, c)] * dz[c]).sum();
                let scale = 1.0 + dz.iter().map(|v| v.abs()).fold(0.0, f64::max);
                if normal.abs() > TOL_NEUMANN * scale {
                    return Err(Error::BoundaryIncompatible {
                        normal_derivative: normal,
                    });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fokker_planck::{fd_solve, FdOptions};
    use crate::geometry::EuclideanMetric;
    use crate::measures::DiscreteDomain;
    use std::f64::consts::PI;

    fn heat_solution(n: usize, dt: f64) -> FdSolution {
        let d = Arc::new(
            DiscreteDomain::interval(0.0, 1.0, n, Arc::new(EuclideanMetric::new(1))).unwrap(),
        );
        let rho0 = DiscreteDensity::from_fn(d, |x| 1.0 + 0.5 * (PI * x[0]).cos()).unwrap();
        fd_solve(&rho0, &DriftPotential::zero(), &FdOptions::new(dt, 0.25)).unwrap()
    }

    #[test]
    fn dictionary_gradients_match_finite_differences() {
        for bounds in [
            BoxBounds::new(vec![-1.0], vec![2.0]).unwrap(),
            BoxBounds::new(vec![0.0, -1.0], vec![1.0, 3.0]).unwrap(),
        ] {
            let dict = neumann_dictionary(&bounds);
            assert_eq!(dict.len(), 8);
            let x: Vec<f64> = bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(l, u)| l + 0.37 * (u - l))
                .collect();
            for z in &dict {
                let fd = crate::linalg::fd_gradient(|y| Ok(z.value(y)), &x).unwrap();
                let g = z.grad(&x);
                for (a, b) in fd.iter().zip(&g) {
                    assert!((a - b).abs() < 1e-7, "{}: {a} vs {b}", z.name);
                }
            }
        }
    }

    #[test]
    fn constant_test_function_gives_zero() {
        let sol = heat_solution(32, 1e-3);
        let one = &neumann_dictionary(sol.domain.bounds())[0];
        let eta = TimeProfile::new(0.2).unwrap();
        assert!(weak_residual(&sol, one, &eta, &DriftPotential::zero(), 1.0).unwrap() < 1e-14);
    }

    #[test]
    fn heat_solution_has_small_residual() {
        let sol = heat_solution(128, 1e-4);
        let eta = TimeProfile::new(0.2).unwrap();
        let zeta = TestFunction::new(
            "cos",
            |x| (PI * x[0]).cos(),
            |x| vec![-PI * (PI * x[0]).sin()],
        );
        let r = weak_residual(&sol, &zeta, &eta, &DriftPotential::zero(), 1.0).unwrap();
        assert!(r < 1e-3, "{r}");
        let dict = neumann_dictionary(sol.domain.bounds());
        assert!(weak_residual_max(&sol, &dict, &eta, &DriftPotential::zero(), 1.0).unwrap() < 1e-3);
    }

    #[test]
    fn non_neumann_test_function_is_rejected() {
        let sol = heat_solution(16, 1e-2);
        let eta = TimeProfile::new(0.2).unwrap();
        let zeta = TestFunction::new("x", |x| x[0], |_| vec![1.0]);
        assert!(matches!(
            weak_residual(&sol, &zeta, &eta, &DriftPotential::zero(), 1.0),
            Err(Error::BoundaryIncompatible { .. })
        ));
    }
}
