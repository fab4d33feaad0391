//! Inner solvers for one proximal step, in node masses `m_i = rho_i w_i`.

use nalgebra::{DMatrix, DVector};

use crate::linalg::log_sum_exp;
use crate::transport::{exact_ot, CostMatrix};
use crate::Result;

/// One step of
/// `min_m  s sum m log(m / w) + tau sum psi m + min_pi [<C, pi> + eps sum pi log pi]`
/// (the proximal objective times `tau`, with `s = tau beta^{-1}`), where `pi`
/// has row sums `m` and column sums `q`.
///
/// Solved through the concave dual in `(f, g)`:
/// `pi_ij = exp((f_i + g_j - C_ij)/eps - 1)`, `m_i = w_i exp(-(f_i + tau psi_i)/s - 1)`.
pub(crate) struct EntropicStep<'a> {
    pub cost: &'a CostMatrix,
    pub q: &'a [f64],
    pub w: &'a [f64],
    pub psi: &'a [f64],
    pub tau: f64,
    pub beta_inv: f64,
    pub eps: f64,
}

pub(crate) struct EntropicSolution {
    pub masses: Vec<f64>,
    /// Row potential on every node.
    pub f: Vec<f64>,
    /// Column potential; `-inf` on nodes where `q` vanishes.
    pub g: Vec<f64>,
    /// Row-major plan over all nodes.
    pub plan: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub fallbacks: usize,
}

struct Reduced {
    n: usize,
    k: usize,
    c: Vec<f64>,
    q: Vec<f64>,
    cols: Vec<usize>,
}

struct Eval {
    dual: f64,
    p: Vec<f64>,
    m: Vec<f64>,
}

impl EntropicStep<'_> {
    fn s(&self) -> f64 {
        self.tau * self.beta_inv
    }

    fn reduce(&self) -> Reduced {
        let n = self.q.len();
        let cols: Vec<usize> = (0..n).filter(|&j| self.q[j] > 0.0).collect();
        let k = cols.len();
        let mut c = Vec::with_capacity(n * k);
        for i in 0..n {
            for &j in &cols {
                c.push(self.cost.get(i, j));
            }
        }
        let q = cols.iter().map(|&j| self.q[j]).collect();
        Reduced { n, k, c, q, cols }
    }

    fn eval(&self, r: &Reduced, f: &[f64], g: &[f64]) -> Eval {
        let (eps, s) = (self.eps, self.s());
        let mut p = vec![0.0; r.n * r.k];
        let mut total_p = 0.0;
        for i in 0..r.n {
            for j in 0..r.k {
                let v = ((f[i] + g[j] - r.c[i * r.k + j]) / eps - 1.0).exp();
                p[i * r.k + j] = v;
                total_p += v;
            }
        }
        let m: Vec<f64> = (0..r.n)
            .map(|i| self.w[i] * ((-f[i] - self.tau * self.psi[i]) / s - 1.0).exp())
            .collect();
        let dual = -eps * total_p - s * m.iter().sum::<f64>() + crate::linalg::dot(g, &r.q);
        Eval { dual, p, m }
    }

    fn block_update(&self, r: &Reduced, f: &mut [f64], g: &mut [f64]) {
        let (eps, s) = (self.eps, self.s());
        for i in 0..r.n {
            let row = &r.c[i * r.k..(i + 1) * r.k];
            let lse = log_sum_exp(row.iter().zip(g.iter()).map(|(c, gj)| (gj - c) / eps - 1.0));
            f[i] =
                (self.w[i].ln() - self.tau * self.psi[i] / s - 1.0 - lse) / (1.0 / eps + 1.0 / s);
        }
        self.update_g(r, f, g);
    }

    fn update_g(&self, r: &Reduced, f: &[f64], g: &mut [f64]) {
        let eps = self.eps;
        for j in 0..r.k {
            let lse = log_sum_exp((0..r.n).map(|i| (f[i] - r.c[i * r.k + j]) / eps - 1.0));
            g[j] = eps * (r.q[j].ln() - lse);
        }
    }

    /// Newton ascent on the dual (Schur complement on the diagonal `g` block,
    /// Jacobi-scaled Cholesky, Armijo backtracking) with closed-form block
    /// ascent as the fallback step.
    pub fn solve(
        &self,
        warm: Option<(&[f64], &[f64])>,
        tol: f64,
        max_iters: usize,
    ) -> EntropicSolution {
        let r = self.reduce();
        let s = self.s();
        let mut f: Vec<f64>;
        let mut g: Vec<f64> = vec![0.0; r.k];
        let warm_ok = warm.filter(|(f0, g0)| {
            f0.len() == r.n
                && g0.len() == r.n
                && r.cols.iter().all(|&j| g0[j].is_finite())
                && f0.iter().all(|v| v.is_finite())
        });
        if let Some((f0, g0)) = warm_ok {
            f = f0.to_vec();
            for (jj, &j) in r.cols.iter().enumerate() {
                g[jj] = g0[j];
            }
        } else {
            let qmax = self
                .q
                .iter()
                .zip(self.w)
                .map(|(q, w)| q / w)
                .fold(0.0, f64::max);
            f = (0..r.n)
                .map(|i| {
                    let rho = (self.q[i] / self.w[i]).max(1e-12 * qmax);
                    -self.tau * self.psi[i] - s * (rho.ln() + 1.0)
                })
                .collect();
            self.update_g(&r, &f, &mut g);
        }

        let mut fallbacks = 0;
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        for it in 0..max_iters {
            iterations = it + 1;
            let ev = self.eval(&r, &f, &g);
            let row: Vec<f64> = ev.p.chunks(r.k).map(|c| c.iter().sum()).collect();
            let mut col = vec![0.0; r.k];
            for chunk in ev.p.chunks(r.k) {
                for (a, b) in col.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            let gf: Vec<f64> = ev.m.iter().zip(&row).map(|(m, r)| m - r).collect();
            let gg: Vec<f64> = r.q.iter().zip(&col).map(|(q, c)| q - c).collect();
            residual = gf.iter().chain(&gg).map(|v| v.abs()).sum();
            if !residual.is_finite() {
                fallbacks += 1;
                self.block_update(&r, &mut f, &mut g);
                continue;
            }
            if residual < tol {
                iterations = it;
                break;
            }
            match self.newton_direction(&r, &ev, &row, &col, &gf, &gg) {
                Some((df, dg)) => {
                    let slope = crate::linalg::dot(&gf, &df) + crate::linalg::dot(&gg, &dg);
                    let mut step = 1.0;
                    let mut accepted = false;
                    while step > 1e-12 {
                        let f2: Vec<f64> = f.iter().zip(&df).map(|(a, b)| a + step * b).collect();
                        let g2: Vec<f64> = g.iter().zip(&dg).map(|(a, b)| a + step * b).collect();
                        let d2 = self.eval_dual(&r, &f2, &g2);
                        if d2.is_finite()
                            && d2 >= ev.dual + 1e-4 * step * slope - 1e-15 * ev.dual.abs()
                        {
                            f = f2;
                            g = g2;
                            accepted = true;
                            break;
                        }
                        step *= 0.5;
                    }
                    if !accepted {
                        fallbacks += 1;
                        self.block_update(&r, &mut f, &mut g);
                    }
                }
                None => {
                    fallbacks += 1;
                    self.block_update(&r, &mut f, &mut g);
                }
            }
        }
        let ev = self.eval(&r, &f, &g);
        let mut plan = vec![0.0; r.n * r.n];
        let mut big_g = vec![f64::NEG_INFINITY; r.n];
        for (jj, &j) in r.cols.iter().enumerate() {
            big_g[j] = g[jj];
            for i in 0..r.n {
                plan[i * r.n + j] = ev.p[i * r.k + jj];
            }
        }
        EntropicSolution {
            masses: ev.m,
            f,
            g: big_g,
            plan,
            iterations,
            residual,
            fallbacks,
        }
    }

    fn eval_dual(&self, r: &Reduced, f: &[f64], g: &[f64]) -> f64 {
        let (eps, s) = (self.eps, self.s());
        let mut total = 0.0;
        for i in 0..r.n {
            for j in 0..r.k {
                total += ((f[i] + g[j] - r.c[i * r.k + j]) / eps - 1.0).exp();
            }
        }
        let m: f64 = (0..r.n)
            .map(|i| self.w[i] * ((-f[i] - self.tau * self.psi[i]) / s - 1.0).exp())
            .sum();
        -eps * total - s * m + crate::linalg::dot(g, &r.q)
    }

    fn newton_direction(
        &self,
        r: &Reduced,
        ev: &Eval,
        row: &[f64],
        col: &[f64],
        gf: &[f64],
        gg: &[f64],
    ) -> Option<(Vec<f64>, Vec<f64>)> {
        let (eps, s) = (self.eps, self.s());
        if col.iter().any(|c| !(*c > 0.0)) {
            return None;
        }
        let b: Vec<f64> = col.iter().map(|c| c / eps).collect();
        // Pd = (P / eps) diag(1 / sqrt(b)), so S = diag(a) - Pd Pd^T.
        let pd = DMatrix::from_fn(r.n, r.k, |i, j| ev.p[i * r.k + j] / eps / b[j].sqrt());
        let mut schur = -(&pd * pd.transpose());
        for i in 0..r.n {
            schur[(i, i)] += row[i] / eps + ev.m[i] / s;
        }
        let rhs: Vec<f64> = (0..r.n)
            .map(|i| {
                gf[i]
                    - (0..r.k)
                        .map(|j| ev.p[i * r.k + j] / eps * gg[j] / b[j])
                        .sum::<f64>()
            })
            .collect();
        let d: Vec<f64> = (0..r.n)
            .map(|i| schur[(i, i)].max(f64::MIN_POSITIVE).sqrt())
            .collect();
        let scaled = DMatrix::from_fn(r.n, r.n, |i, j| schur[(i, j)] / (d[i] * d[j]));
        let chol = scaled.cholesky()?;
        let y = chol.solve(&DVector::from_iterator(
            r.n,
            rhs.iter().zip(&d).map(|(v, di)| v / di),
        ));
        let df: Vec<f64> = y.iter().zip(&d).map(|(v, di)| v / di).collect();
        if df.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let dg: Vec<f64> = (0..r.k)
            .map(|j| {
                (gg[j]
                    - (0..r.n)
                        .map(|i| ev.p[i * r.k + j] / eps * df[i])
                        .sum::<f64>())
                    / b[j]
            })
            .collect();
        Some((df, dg))
    }
}

/// Result of the mirror-descent solver with exact transport.
pub(crate) struct MirrorSolution {
    pub masses: Vec<f64>,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Entropic mirror descent on the simplex for
/// `beta^{-1} sum m log(m / w) + sum psi m + T_c(m, q) / tau`,
/// using the exact row duals as transport gradients. Returns the best iterate.
pub(crate) fn mirror_descent(
    cost: &CostMatrix,
    q: &[f64],
    w: &[f64],
    psi: &[f64],
    tau: f64,
    beta_inv: f64,
    tol: f64,
    max_iters: usize,
) -> Result<MirrorSolution> {
    let n = q.len();
    let floor = 1e-300;
    let mut m: Vec<f64> = q.iter().map(|v| v.max(1e-14)).collect();
    let total: f64 = m.iter().sum();
    m.iter_mut().for_each(|v| *v /= total);
    let mut best = MirrorSolution {
        masses: m.clone(),
        objective: f64::INFINITY,
        residual: f64::INFINITY,
        iterations: 0,
    };
    for it in 0..max_iters {
        let plan = exact_ot(cost, &m, q)?;
        let u = &plan.duals.0;
        let grad: Vec<f64> = (0..n)
            .map(|i| beta_inv * ((m[i] / w[i]).max(floor).ln() + 1.0) + psi[i] + u[i] / tau)
            .collect();
        let objective: f64 = (0..n)
            .map(|i| beta_inv * m[i] * (m[i] / w[i]).max(floor).ln() + psi[i] * m[i])
            .sum::<f64>()
            + plan.cost_value / tau;
        let mean: f64 = grad.iter().zip(&m).map(|(g, mi)| g * mi).sum();
        let residual: f64 = grad
            .iter()
            .zip(&m)
            .map(|(g, mi)| mi * (g - mean).abs())
            .sum();
        if objective < best.objective {
            best = MirrorSolution {
                masses: m.clone(),
                objective,
                residual,
                iterations: it + 1,
            };
        }
        if residual < tol {
            best.residual = residual;
            return Ok(best);
        }
        let eta = 0.5 / (beta_inv * ((it + 1) as f64).sqrt());
        let logs: Vec<f64> = (0..n)
            .map(|i| m[i].max(floor).ln() - eta * (grad[i] - mean))
            .collect();
        let lse = log_sum_exp(logs.iter().copied());
        m = logs.iter().map(|l| (l - lse).exp()).collect();
    }
    best.iterations = max_iters;
    Ok(best)
}
