use nalgebra::{DMatrix, DVector};

use super::{check_marginals, CostMatrix, SolverTag, TransportPlan};
use crate::linalg::log_sum_exp;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropicOptions {
    pub max_iters: usize,
    /// Stop when the L1 row-marginal error drops below this.
    pub tol_marginal: f64,
    /// Also compute the Sinkhorn divergence (square costs on a shared grid).
    pub debias: bool,
    /// Force log-domain iterations; otherwise they are used when
    /// `eps < 0.05 * median(C)` or after the scaling iterations underflow.
    pub force_log_domain: bool,
}

impl Default for EntropicOptions {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol_marginal: 1e-9,
            debias: false,
            force_log_domain: false,
        }
    }
}

pub fn entropic_ot(cost: &CostMatrix, mu: &[f64], nu: &[f64], eps: f64) -> Result<TransportPlan> {
    entropic_ot_with(cost, mu, nu, eps, &EntropicOptions::default(), None)
}

/// Sinkhorn iterations for
/// `min <C, pi> + eps sum pi_ij log pi_ij` over couplings of `mu` and `nu`.
///
/// The optimal plan is `pi_ij = exp((f_i + g_j - C_ij) / eps)`; `warm` seeds
/// `(f, g)`. Zero-mass nodes get potential `-inf`.
pub fn entropic_ot_with(
    cost: &CostMatrix,
    mu: &[f64],
    nu: &[f64],
    eps: f64,
    opts: &EntropicOptions,
    warm: Option<(&[f64], &[f64])>,
) -> Result<TransportPlan> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidInput(format!(
            "entropic eps must be positive, got {eps}"
        )));
    }
    check_marginals(cost, mu, nu)?;
    let (plan, iterations) = solve(cost, mu, nu, eps, opts, warm)?;
    let mut out = plan;
    out.iterations = iterations;
    if opts.debias {
        if cost.rows() != cost.cols() {
            return Err(Error::InvalidInput(
                "debiasing needs a square cost on a shared grid".into(),
            ));
        }
        let inner = EntropicOptions {
            debias: false,
            ..*opts
        };
        let (paa, _) = solve(cost, mu, mu, eps, &inner, None)?;
        let (pbb, _) = solve(cost, nu, nu, eps, &inner, None)?;
        let r = |p: &TransportPlan| p.regularized_value.unwrap_or(f64::NAN);
        out.debiased_value = Some(r(&out) - 0.5 * r(&paa) - 0.5 * r(&pbb));
    }
    Ok(out)
}

fn solve(
    cost: &CostMatrix,
    mu: &[f64],
    nu: &[f64],
    eps: f64,
    opts: &EntropicOptions,
    warm: Option<(&[f64], &[f64])>,
) -> Result<(TransportPlan, usize)> {
    let rows: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] > 0.0).collect();
    let c: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| cost.get(i, j)))
        .collect();
    let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    let (mut f, mut g) = match warm {
        Some((f0, g0)) if f0.len() == mu.len() && g0.len() == nu.len() => {
            let f: Vec<f64> = rows.iter().map(|&i| f0[i]).collect();
            let g: Vec<f64> = cols.iter().map(|&j| g0[j]).collect();
            if f.iter().chain(&g).all(|v| v.is_finite()) {
                (f, g)
            } else {
                (vec![0.0; a.len()], vec![0.0; b.len()])
            }
        }
        _ => (vec![0.0; a.len()], vec![0.0; b.len()]),
    };
    let mut sk = Sinkhorn {
        c: &c,
        m: a.len(),
        n: b.len(),
        a: &a,
        b: &b,
        eps,
    };
    let use_log = opts.force_log_domain || eps < 0.05 * cost.median();
    let outcome = if use_log {
        sk.log_domain(&mut f, &mut g, opts)
    } else {
        match sk.scaling(&mut f, &mut g, opts) {
            Err(Error::NumericalUnderflow) => {
                log::debug!("entropic transport: scaling underflow, restarting in log domain");
                f.iter_mut().for_each(|v| *v = 0.0);
                g.iter_mut().for_each(|v| *v = 0.0);
                sk.log_domain(&mut f, &mut g, opts)
            }
            other => other,
        }
    };
    let iterations = outcome?;
    sk.eps = eps;

    let (m, n) = (cost.rows(), cost.cols());
    let mut coupling = vec![0.0; m * n];
    let (mut raw, mut ent) = (0.0, 0.0);
    for (ii, &i) in rows.iter().enumerate() {
        for (jj, &j) in cols.iter().enumerate() {
            let cij = c[ii * sk.n + jj];
            let logp = (f[ii] + g[jj] - cij) / eps;
            let p = logp.exp();
            coupling[i * n + j] = p;
            raw += p * cij;
            if p > 0.0 {
                ent += p * logp;
            }
        }
    }
    let mut big_f = vec![f64::NEG_INFINITY; m];
    let mut big_g = vec![f64::NEG_INFINITY; n];
    for (k, &i) in rows.iter().enumerate() {
        big_f[i] = f[k];
    }
    for (k, &j) in cols.iter().enumerate() {
        big_g[j] = g[k];
    }
    Ok((
        TransportPlan {
            rows: m,
            cols: n,
            coupling,
            cost_value: raw,
            solver: SolverTag::Entropic { eps },
            duals: (big_f, big_g),
            regularized_value: Some(raw + eps * ent),
            debiased_value: None,
            iterations,
            degenerate: false,
            certificate_residual: f64::NAN,
        },
        iterations,
    ))
}

struct Sinkhorn<'a> {
    c: &'a [f64],
    m: usize,
    n: usize,
    a: &'a [f64],
    b: &'a [f64],
    eps: f64,
}

impl Sinkhorn<'_> {
    fn update_f(&self, f: &mut [f64], g: &[f64]) {
        let eps = self.eps;
        for i in 0..self.m {
            let row = &self.c[i * self.n..(i + 1) * self.n];
            let lse = log_sum_exp(row.iter().zip(g).map(|(cij, gj)| (gj - cij) / eps));
            f[i] = eps * (self.a[i].ln() - lse);
        }
    }

    fn update_g(&self, f: &[f64], g: &mut [f64]) {
        let eps = self.eps;
        for (j, gj) in g.iter_mut().enumerate() {
            let lse = log_sum_exp((0..self.m).map(|i| (f[i] - self.c[i * self.n + j]) / eps));
            *gj = eps * (self.b[j].ln() - lse);
        }
    }

    fn row_error(&self, f: &[f64], g: &[f64]) -> f64 {
        let eps = self.eps;
        (0..self.m)
            .map(|i| {
                let row = &self.c[i * self.n..(i + 1) * self.n];
                let s: f64 = row
                    .iter()
                    .zip(g)
                    .map(|(cij, gj)| ((f[i] + gj - cij) / eps).exp())
                    .sum();
                (s - self.a[i]).abs()
            })
            .sum()
    }

    fn log_domain(
        &mut self,
        f: &mut [f64],
        g: &mut [f64],
        opts: &EntropicOptions,
    ) -> Result<usize> {
        let mut err = f64::INFINITY;
        for it in 1..=opts.max_iters {
            self.update_f(f, g);
            self.update_g(f, g);
            if it % 10 == 0 || it == 1 {
                err = self.row_error(f, g);
                if !err.is_finite() {
                    return Err(Error::NumericalUnderflow);
                }
                if err < opts.tol_marginal {
                    return Ok(it);
                }
            }
        }
        Err(Error::NoConvergence {
            what: "Sinkhorn",
            iterations: opts.max_iters,
            residual: err,
        })
    }

    /// Classical scaling form `pi = diag(u) K diag(v)`, `K = exp(-C / eps)`.
    fn scaling(&mut self, f: &mut [f64], g: &mut [f64], opts: &EntropicOptions) -> Result<usize> {
        let eps = self.eps;
        let k: Vec<f64> = self.c.iter().map(|c| (-c / eps).exp()).collect();
        let mut u: Vec<f64> = f.iter().map(|v| (v / eps).exp()).collect();
        let mut v: Vec<f64> = g.iter().map(|v| (v / eps).exp()).collect();
        let bad = |x: f64| !(x > 0.0) || !x.is_finite();
        let mut err = f64::INFINITY;
        for it in 1..=opts.max_iters {
            for i in 0..self.m {
                let s: f64 = k[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(&v)
                    .map(|(kk, vv)| kk * vv)
                    .sum();
                u[i] = self.a[i] / s;
                if bad(u[i]) {
                    return Err(Error::NumericalUnderflow);
                }
            }
            for j in 0..self.n {
                let s: f64 = (0..self.m).map(|i| k[i * self.n + j] * u[i]).sum();
                v[j] = self.b[j] / s;
                if bad(v[j]) {
                    return Err(Error::NumericalUnderflow);
                }
            }
            if it % 10 == 0 || it == 1 {
                err = (0..self.m)
                    .map(|i| {
                        let s: f64 = k[i * self.n..(i + 1) * self.n]
                            .iter()
                            .zip(&v)
                            .map(|(kk, vv)| kk * vv)
                            .sum();
                        (u[i] * s - self.a[i]).abs()
                    })
                    .sum();
                if err < opts.tol_marginal {
                    for (fi, ui) in f.iter_mut().zip(&u) {
                        *fi = eps * ui.ln();
                    }
                    for (gj, vj) in g.iter_mut().zip(&v) {
                        *gj = eps * vj.ln();
                    }
                    return Ok(it);
                }
            }
        }
        Err(Error::NoConvergence {
            what: "Sinkhorn",
            iterations: opts.max_iters,
            residual: err,
        })
    }
}

/// Regularized self-transport of a marginal with its optimal potentials.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTransport {
    pub value: f64,
    /// Potentials with `pi_ij = exp((f_i + g_j - C_ij) / eps)`. Zero-mass
    /// nodes carry the c-transform extension computed as if their mass were
    /// `1e-12 * max(a)`.
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
}

/// Regularized self-transport `min <C, pi> + eps sum pi log pi` over
/// couplings of `a` with itself, by Newton's method on the dual
/// `f.a + g.a - eps sum exp((f_i + g_j - C_ij) / eps)`. Small instances at
/// small `eps`, where Sinkhorn needs very many sweeps, converge in a few
/// dozen Newton steps.
pub fn entropic_self_transport(
    cost: &CostMatrix,
    a: &[f64],
    eps: f64,
    tol: f64,
    max_iters: usize,
) -> Result<f64> {
    Ok(entropic_self_transport_potentials(cost, a, eps, tol, max_iters)?.value)
}

pub fn entropic_self_transport_potentials(
    cost: &CostMatrix,
    a: &[f64],
    eps: f64,
    tol: f64,
    max_iters: usize,
) -> Result<SelfTransport> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidInput(format!(
            "entropic eps must be positive, got {eps}"
        )));
    }
    check_marginals(cost, a, a)?;
    let support: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let n = support.len();
    let w: Vec<f64> = support.iter().map(|&i| a[i]).collect();
    let c = DMatrix::from_fn(n, n, |i, j| cost.get(support[i], support[j]));
    let plan = |f: &[f64], g: &[f64]| {
        DMatrix::from_fn(n, n, |i, j| ((f[i] + g[j] - c[(i, j)]) / eps).exp())
    };
    let marginal_error = |f: &[f64], g: &[f64]| -> f64 {
        let p = plan(f, g);
        (0..n)
            .map(|i| (p.row(i).sum() - w[i]).abs() + (p.column(i).sum() - w[i]).abs())
            .sum()
    };
    let dual = |f: &[f64], g: &[f64]| -> f64 {
        let p = plan(f, g);
        f.iter()
            .chain(g)
            .zip(w.iter().chain(&w))
            .map(|(x, m)| x * m)
            .sum::<f64>()
            - eps * p.sum()
    };
    // One half-step from the product coupling gives a feasible-row start.
    let mut g = vec![0.0; n];
    let mut f: Vec<f64> = (0..n)
        .map(|i| eps * w[i].ln() - eps * log_sum_exp((0..n).map(|j| (g[j] - c[(i, j)]) / eps)))
        .collect();
    for (j, gj) in g.iter_mut().enumerate() {
        *gj = eps * w[j].ln() - eps * log_sum_exp((0..n).map(|i| (f[i] - c[(i, j)]) / eps));
    }
    let mut iterations = 0;
    loop {
        let p = plan(&f, &g);
        let r: Vec<f64> = (0..n).map(|i| p.row(i).sum()).collect();
        let col: Vec<f64> = (0..n).map(|j| p.column(j).sum()).collect();
        let err: f64 = r
            .iter()
            .chain(&col)
            .zip(w.iter().chain(&w))
            .map(|(x, m)| (x - m).abs())
            .sum();
        if err < tol {
            break;
        }
        if iterations >= max_iters || !err.is_finite() {
            return Err(Error::NoConvergence {
                what: "entropic self-transport",
                iterations,
                residual: err,
            });
        }
        iterations += 1;
        // Newton system [[R, P], [P^T, Cd]] (df, dg) = eps (a - r, a - c),
        // reduced to the Schur complement on dg with the gauge dg_0 = 0.
        let ra: Vec<f64> = (0..n).map(|i| eps * (w[i] - r[i])).collect();
        let rb: Vec<f64> = (0..n).map(|j| eps * (w[j] - col[j])).collect();
        let rinv: Vec<f64> = r.iter().map(|x| 1.0 / x.max(1e-300)).collect();
        let mut schur = DMatrix::from_diagonal(&DVector::from_vec(col.clone()));
        for i in 0..n {
            let row = p.row(i);
            for j in 0..n {
                let pij = row[j] * rinv[i];
                if pij == 0.0 {
                    continue;
                }
                for k in 0..n {
                    schur[(j, k)] -= pij * row[k];
                }
            }
        }
        let rhs: Vec<f64> = (0..n)
            .map(|j| rb[j] - (0..n).map(|i| p[(i, j)] * rinv[i] * ra[i]).sum::<f64>())
            .collect();
        let reduced = schur.view((1, 1), (n - 1, n - 1)).into_owned();
        let scale: Vec<f64> = (0..n - 1)
            .map(|k| 1.0 / reduced[(k, k)].max(1e-300).sqrt())
            .collect();
        let scaled = DMatrix::from_fn(n - 1, n - 1, |i, j| {
            reduced[(i, j)] * scale[i] * scale[j] + if i == j { 1e-10 } else { 0.0 }
        });
        let mut dg = vec![0.0; n];
        if n > 1 {
            let Some(chol) = scaled.cholesky() else {
                return Err(Error::NoConvergence {
                    what: "entropic self-transport",
                    iterations,
                    residual: err,
                });
            };
            let sol = chol.solve(&DVector::from_fn(n - 1, |k, _| rhs[k + 1] * scale[k]));
            for k in 0..n - 1 {
                dg[k + 1] = sol[k] * scale[k];
            }
        }
        let df: Vec<f64> = (0..n)
            .map(|i| rinv[i] * (ra[i] - (0..n).map(|j| p[(i, j)] * dg[j]).sum::<f64>()))
            .collect();
        let slope: f64 = df
            .iter()
            .zip(&ra)
            .chain(dg.iter().zip(&rb))
            .map(|(d, x)| d * x)
            .sum::<f64>()
            / eps;
        let base = dual(&f, &g);
        let mut step = 1.0;
        loop {
            let fs: Vec<f64> = f.iter().zip(&df).map(|(x, d)| x + step * d).collect();
            let gs: Vec<f64> = g.iter().zip(&dg).map(|(x, d)| x + step * d).collect();
            let v = dual(&fs, &gs);
            // Near the optimum the dual increase drops below its rounding
            // error, so a decrease of the marginal error also accepts.
            if v.is_finite()
                && (v >= base + 1e-4 * step * slope
                    || marginal_error(&fs, &gs) < (1.0 - 1e-4 * step) * err)
            {
                f = fs;
                g = gs;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return Err(Error::NoConvergence {
                    what: "entropic self-transport line search",
                    iterations,
                    residual: err,
                });
            }
        }
    }
    let p = plan(&f, &g);
    let mut value = 0.0;
    for (k, pk) in p.iter().enumerate() {
        if *pk > 0.0 {
            value += pk * c[(k % n, k / n)] + eps * pk * pk.ln();
        }
    }
    let floor = (1e-12 * w.iter().cloned().fold(0.0, f64::max)).ln();
    let mut f_full = vec![0.0; a.len()];
    let mut g_full = vec![0.0; a.len()];
    let mut pos = 0;
    for i in 0..a.len() {
        if pos < n && support[pos] == i {
            f_full[i] = f[pos];
            g_full[i] = g[pos];
            pos += 1;
        } else {
            f_full[i] = eps * floor
                - eps
                    * log_sum_exp(
                        support
                            .iter()
                            .zip(&g)
                            .map(|(&j, gj)| (gj - cost.get(i, j)) / eps),
                    );
            g_full[i] = eps * floor
                - eps
                    * log_sum_exp(
                        support
                            .iter()
                            .zip(&f)
                            .map(|(&j, fj)| (fj - cost.get(j, i)) / eps),
                    );
        }
    }
    Ok(SelfTransport {
        value,
        f: f_full,
        g: g_full,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::exact_ot;
    use rand::{Rng, SeedableRng};

    fn random_instance(n: usize, seed: u64) -> (CostMatrix, Vec<f64>, Vec<f64>) {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let c = CostMatrix::from_fn(n, n, |i, j| (xs[i] - ys[j]).powi(2)).unwrap();
        let mut a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.1).collect();
        let mut b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.1).collect();
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        a.iter_mut().for_each(|x| *x /= sa);
        b.iter_mut().for_each(|x| *x /= sb);
        (c, a, b)
    }

    #[test]
    fn large_eps_gives_product_coupling() {
        let (c, a, b) = random_instance(8, 1);
        let p = entropic_ot(&c, &a, &b, 1e7).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert!((p.get(i, j) - a[i] * b[j]).abs() < 1e-5 * a[i] * b[j]);
            }
        }
    }

    #[test]
    fn small_eps_approaches_exact() {
        let (c, a, b) = random_instance(20, 2);
        let exact = exact_ot(&c, &a, &b).unwrap().cost_value;
        let mut prev = f64::INFINITY;
        for eps in [1.0, 0.1, 0.01, 1e-3] {
            let p = entropic_ot(&c, &a, &b, eps).unwrap();
            assert!(p.marginal_residual(&a, &b) < 1e-6);
            assert!(p.cost_value >= exact - 1e-12);
            assert!(p.cost_value <= exact + 2.0 * eps * 20f64.ln());
            assert!(p.cost_value <= prev + 1e-9);
            prev = p.cost_value;
        }
    }

    #[test]
    fn log_and_scaling_domains_agree() {
        let (c, a, b) = random_instance(12, 3);
        let eps = 0.2;
        let s = entropic_ot(&c, &a, &b, eps).unwrap();
        let opts = EntropicOptions {
            force_log_domain: true,
            ..Default::default()
        };
        let l = entropic_ot_with(&c, &a, &b, eps, &opts, None).unwrap();
        assert!((s.cost_value - l.cost_value).abs() < 1e-9);
        // Dual objective equals the regularized value at convergence.
        let dual = crate::linalg::dot(&l.duals.0, &a) + crate::linalg::dot(&l.duals.1, &b);
        assert!((dual - l.regularized_value.unwrap()).abs() < 1e-8);
    }

    #[test]
    fn underflow_falls_back_to_log_domain() {
        let c =
            CostMatrix::from_fn(6, 6, |i, j| 1e3 * (i as f64 - j as f64).powi(2) + 800.0).unwrap();
        let u = vec![1.0 / 6.0; 6];
        // eps is large relative to the spread but exp(-C/eps) underflows.
        let p = entropic_ot(&c, &u, &u, 1.0).unwrap();
        assert!(p.marginal_residual(&u, &u) < 1e-6);
    }

    #[test]
    fn debiased_divergence_vanishes_on_the_diagonal() {
        let (c, a, _) = random_instance(10, 4);
        let c = CostMatrix::from_fn(10, 10, |i, j| {
            (i as f64 - j as f64).powi(2) / 100.0 + 0.0 * c.get(i, j)
        })
        .unwrap();
        let opts = EntropicOptions {
            debias: true,
            ..Default::default()
        };
        let p = entropic_ot_with(&c, &a, &a, 0.05, &opts, None).unwrap();
        assert!(p.debiased_value.unwrap().abs() < 1e-9);
    }

    #[test]
    fn zero_mass_nodes_are_excluded() {
        let c = CostMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64).abs()).unwrap();
        let p = entropic_ot(&c, &[0.5, 0.0, 0.5], &[0.2, 0.3, 0.5], 0.1).unwrap();
        assert_eq!(p.duals.0[1], f64::NEG_INFINITY);
        assert!(p.row_sums()[1] == 0.0);
        assert!(p.marginal_residual(&[0.5, 0.0, 0.5], &[0.2, 0.3, 0.5]) < 1e-6);
    }

    #[test]
    fn self_transport_newton_matches_sinkhorn() {
        let n = 24;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let cost = CostMatrix::from_fn(n, n, |i, j| (x[i] - x[j]).powi(2) * (1.0 + x[j])).unwrap();
        let mut a: Vec<f64> = x.iter().map(|t| 1.0 + 0.5 * (3.0 * t).sin()).collect();
        a[5] = 0.0;
        let s: f64 = a.iter().sum();
        a.iter_mut().for_each(|v| *v /= s);
        for eps in [1e-1, 1e-2, 3e-3] {
            let opts = EntropicOptions {
                tol_marginal: 1e-9,
                force_log_domain: true,
                ..Default::default()
            };
            let reference = entropic_ot_with(&cost, &a, &a, eps, &opts, None)
                .unwrap()
                .regularized_value
                .unwrap();
            let fast = entropic_self_transport(&cost, &a, eps, 1e-10, 200).unwrap();
            assert!(
                (fast - reference).abs() < 1e-7,
                "eps {eps}: {fast} vs {reference}"
            );
        }
    }
}
