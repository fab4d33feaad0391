use std::collections::VecDeque;

use super::{check_marginals, CostMatrix, SolverTag, TransportPlan};
use crate::{Error, Result};

pub const EXACT_SIZE_CAP: usize = 10_000;
pub const TOL_LP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactOptions {
    /// Largest `rows * cols` accepted by the simplex. Monge instances, whose
    /// north-west corner plan is optimal, are exempt.
    pub size_cap: usize,
    pub tol_lp: f64,
    /// Consecutive degenerate pivots before switching to Bland's rule.
    pub degenerate_limit: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self {
            size_cap: EXACT_SIZE_CAP,
            tol_lp: TOL_LP,
            degenerate_limit: 50,
        }
    }
}

pub fn exact_ot(cost: &CostMatrix, mu: &[f64], nu: &[f64]) -> Result<TransportPlan> {
    exact_ot_with(cost, mu, nu, &ExactOptions::default())
}

/// `C_ij + C_{i+1,j+1} <= C_{i,j+1} + C_{i+1,j}` for all adjacent pairs.
pub fn is_monge(cost: &CostMatrix) -> bool {
    let tol = 1e-12 * cost.max().max(1.0);
    for i in 0..cost.rows().saturating_sub(1) {
        for j in 0..cost.cols().saturating_sub(1) {
            if cost.get(i, j) + cost.get(i + 1, j + 1)
                > cost.get(i, j + 1) + cost.get(i + 1, j) + tol
            {
                return false;
            }
        }
    }
    true
}

/// Transportation simplex on the supports of `mu` and `nu`, started from the
/// north-west corner basis. Returns an optimal vertex together with dual
/// potentials certifying optimality.
pub fn exact_ot_with(
    cost: &CostMatrix,
    mu: &[f64],
    nu: &[f64],
    opts: &ExactOptions,
) -> Result<TransportPlan> {
    check_marginals(cost, mu, nu)?;
    let rows: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] > 0.0).collect();
    let sub = CostMatrix::from_fn(rows.len(), cols.len(), |i, j| cost.get(rows[i], cols[j]))?;
    let monge = is_monge(&sub);
    let entries = cost.rows() * cost.cols();
    if !monge && entries > opts.size_cap {
        return Err(Error::SizeCap {
            entries,
            cap: opts.size_cap,
        });
    }
    let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();
    let mut tree = Basis::north_west(&a, &b);
    let pivots = tree.optimize(&sub, opts)?;
    let (u, v) = tree.duals(&sub);

    let scale = sub.max().max(1.0);
    let mut residual: f64 = 0.0;
    for i in 0..sub.rows() {
        for j in 0..sub.cols() {
            residual = residual.max(u[i] + v[j] - sub.get(i, j));
        }
    }
    for (k, &(i, j)) in tree.cells.iter().enumerate() {
        if tree.flow[k] > 0.0 {
            residual = residual.max((sub.get(i, j) - u[i] - v[j]).abs());
        }
    }
    if residual > opts.tol_lp * scale {
        return Err(Error::NoConvergence {
            what: "transportation simplex",
            iterations: pivots,
            residual,
        });
    }

    let (m, n) = (cost.rows(), cost.cols());
    let mut coupling = vec![0.0; m * n];
    let mut cost_value = 0.0;
    let mut degenerate = false;
    for (k, &(i, j)) in tree.cells.iter().enumerate() {
        let f = tree.flow[k];
        if f > 0.0 {
            coupling[rows[i] * n + cols[j]] = f;
            cost_value += f * sub.get(i, j);
        } else {
            degenerate = true;
        }
    }
    let mut big_u = vec![f64::NAN; m];
    let mut big_v = vec![f64::NAN; n];
    for (k, &i) in rows.iter().enumerate() {
        big_u[i] = u[k];
    }
    for (k, &j) in cols.iter().enumerate() {
        big_v[j] = v[k];
    }
    // Zero-mass nodes get c-transforms of the support duals.
    for i in 0..m {
        if big_u[i].is_nan() {
            big_u[i] = cols
                .iter()
                .map(|&j| cost.get(i, j) - big_v[j])
                .fold(f64::INFINITY, f64::min);
        }
    }
    for j in 0..n {
        if big_v[j].is_nan() {
            big_v[j] = rows
                .iter()
                .map(|&i| cost.get(i, j) - big_u[i])
                .fold(f64::INFINITY, f64::min);
        }
    }
    if degenerate {
        log::debug!("exact transport: degenerate optimal basis");
    }
    Ok(TransportPlan {
        rows: m,
        cols: n,
        coupling,
        cost_value,
        solver: SolverTag::Exact,
        duals: (big_u, big_v),
        regularized_value: None,
        debiased_value: None,
        iterations: pivots,
        degenerate,
        certificate_residual: residual,
    })
}

/// Spanning-tree basis of the transportation polytope.
struct Basis {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    position: Vec<usize>,
}

const NOT_BASIC: usize = usize::MAX;

impl Basis {
    fn north_west(a: &[f64], b: &[f64]) -> Self {
        let (m, n) = (a.len(), b.len());
        let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
        let mut cells = Vec::with_capacity(m + n - 1);
        let mut flow = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let q = if i + 1 == m && j + 1 == n {
                ra[i].max(rb[j])
            } else {
                ra[i].min(rb[j]).max(0.0)
            };
            cells.push((i, j));
            flow.push(q);
            ra[i] -= q;
            rb[j] -= q;
            if i + 1 == m && j + 1 == n {
                break;
            }
            if i + 1 == m {
                j += 1;
            } else if j + 1 == n || ra[i] <= rb[j] {
                i += 1;
            } else {
                j += 1;
            }
        }
        let mut position = vec![NOT_BASIC; m * n];
        for (k, &(i, j)) in cells.iter().enumerate() {
            position[i * n + j] = k;
        }
        Self {
            m,
            n,
            cells,
            flow,
            position,
        }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    fn duals(&self, c: &CostMatrix) -> (Vec<f64>, Vec<f64>) {
        let adj = self.adjacency();
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &(next, k) in &adj[node] {
                if pot[next].is_nan() {
                    let (i, j) = self.cells[k];
                    pot[next] = c.get(i, j) - pot[node];
                    queue.push_back(next);
                }
            }
        }
        let v = pot.split_off(self.m);
        (pot, v)
    }

    /// Basis cells on the tree path from column node `m + q` to row node `p`,
    /// ordered starting next to the column.
    fn path(&self, p: usize, q: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let mut parent = vec![(usize::MAX, usize::MAX); self.m + self.n];
        parent[p] = (p, usize::MAX);
        let mut queue = VecDeque::from([p]);
        let target = self.m + q;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &(next, k) in &adj[node] {
                if parent[next].0 == usize::MAX {
                    parent[next] = (node, k);
                    queue.push_back(next);
                }
            }
        }
        let mut edges = Vec::new();
        let mut node = target;
        while node != p {
            let (prev, k) = parent[node];
            edges.push(k);
            node = prev;
        }
        edges
    }

    fn optimize(&mut self, c: &CostMatrix, opts: &ExactOptions) -> Result<usize> {
        let scale = c.max().max(1.0);
        let tol = 1e-13 * scale;
        let max_pivots = 20 * self.m * self.n + 1000;
        let mut degenerate_run = 0;
        for pivot in 0..max_pivots {
            let (u, v) = self.duals(c);
            let bland = degenerate_run >= opts.degenerate_limit;
            let mut entering = None;
            let mut best = -tol;
            'scan: for i in 0..self.m {
                for j in 0..self.n {
                    if self.position[i * self.n + j] != NOT_BASIC {
                        continue;
                    }
                    let r = c.get(i, j) - u[i] - v[j];
                    if r < best {
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                        best = r;
                    }
                }
            }
            let Some((p, q)) = entering else {
                return Ok(pivot);
            };
            let path = self.path(p, q);
            let mut theta = f64::INFINITY;
            let mut leaving = usize::MAX;
            for &k in path.iter().step_by(2) {
                let f = self.flow[k];
                let better = f < theta
                    || (f == theta && {
                        let (i, j) = self.cells[k];
                        let (li, lj) = self.cells[leaving];
                        i * self.n + j < li * self.n + lj
                    });
                if better {
                    theta = f;
                    leaving = k;
                }
            }
            for (t, &k) in path.iter().enumerate() {
                if t % 2 == 0 {
                    self.flow[k] = (self.flow[k] - theta).max(0.0);
                } else {
                    self.flow[k] += theta;
                }
            }
            degenerate_run = if theta > 0.0 { 0 } else { degenerate_run + 1 };
            let (li, lj) = self.cells[leaving];
            self.position[li * self.n + lj] = NOT_BASIC;
            self.cells[leaving] = (p, q);
            self.flow[leaving] = theta;
            self.position[p * self.n + q] = leaving;
        }
        Err(Error::NoConvergence {
            what: "transportation simplex",
            iterations: max_pivots,
            residual: f64::NAN,
        })
    }
}
