//! The proximal step, the flow runner and their diagnostics.
//!
//! Each step minimizes
//! `J_k(rho) = beta^{-1} E(rho) + D(rho) + T(rho, rho_k) / tau`
//! over densities on a fixed grid. With the default entropic-proximal
//! solver `T` is the entropy-regularized transport cost
//! `min <C, pi> + eps sum pi log pi`; the mirror-descent solver uses the
//! exact cost.

mod diagnostics;
mod inner;

use std::sync::Arc;

use crate::geometry::CostFunction;
use crate::measures::{drift, entropy, DiscreteDensity, DiscreteDomain, DriftPotential};
use crate::transport::{
    entropic_ot_with, entropic_self_transport, entropic_self_transport_potentials, exact_ot,
    CostMatrix, EntropicOptions, SolverTag, TransportPlan,
};
use crate::{Error, Result};

pub use diagnostics::{
    default_el_fields, euler_lagrange_residual, telescoping_check, time_regularity_report,
    TelescopingReport, TimeRegularityReport, VectorField,
};

/// How the entropic parameter is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsRule {
    /// `fraction * median(C)`, optionally solved first at twice that value.
    MedianFraction {
        fraction: f64,
        continuation: bool,
    },
    Fixed(f64),
    /// `coef * tau`.
    TauLinear(f64),
    /// `coef * tau^2`.
    TauSquared(f64),
}

impl Default for EpsRule {
    fn default() -> Self {
        EpsRule::MedianFraction {
            fraction: 1e-2,
            continuation: true,
        }
    }
}

impl EpsRule {
    pub fn resolve(&self, tau: f64, cost: &CostMatrix) -> f64 {
        match *self {
            EpsRule::MedianFraction { fraction, .. } => {
                let med = cost.median();
                fraction
                    * if med > 0.0 {
                        med
                    } else {
                        cost.positive_median().max(1e-12)
                    }
            }
            EpsRule::Fixed(e) => e,
            EpsRule::TauLinear(c) => c * tau,
            EpsRule::TauSquared(c) => c * tau * tau,
        }
    }

    fn continuation(&self) -> bool {
        matches!(
            self,
            EpsRule::MedianFraction {
                continuation: true,
                ..
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSolver {
    EntropicProximal,
    MirrorDescent,
}

/// Parameters of a flow.
#[derive(Debug, Clone)]
pub struct JkoConfig {
    pub tau: f64,
    pub beta_inv: f64,
    pub t_end: f64,
    pub psi: DriftPotential,
    pub cost: Arc<dyn CostFunction>,
    pub cost_name: String,
    pub inner_solver: InnerSolver,
    pub eps: EpsRule,
    /// Replace `beta^{-1}` by `beta^{-1} - eps / (2 tau)` in the entropy
    /// weight, compensating the diffusion added by the entropic blur.
    pub blur_correction: bool,
    /// Subtract the self-transport of the previous step and its first
    /// variation, `T_eps(rho, q) - T_eps(q, q) - <(f_q + g_q) / 2, rho - q>`,
    /// which removes the blur and boundary bias of the entropic term.
    pub debias: bool,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Keep the best iterate instead of failing when the inner solver stalls.
    pub accept_best: bool,
    /// Record the Euler-Lagrange residual for [`default_el_fields`].
    pub el_diagnostics: bool,
    /// Record exact transport costs between consecutive steps when the exact
    /// solver accepts the instance.
    pub exact_diagnostics: bool,
    /// Reference point for the second moment (defaults to the domain center).
    pub moment_center: Option<Vec<f64>>,
}

impl JkoConfig {
    pub fn new(tau: f64, t_end: f64, cost: Arc<dyn CostFunction>) -> Self {
        Self {
            tau,
            beta_inv: 1.0,
            t_end,
            psi: DriftPotential::zero(),
            cost_name: cost.name(),
            cost,
            inner_solver: InnerSolver::EntropicProximal,
            eps: EpsRule::default(),
            blur_correction: false,
            debias: false,
            inner_tol: 1e-8,
            inner_max_iters: 500,
            accept_best: false,
            el_diagnostics: true,
            exact_diagnostics: true,
            moment_center: None,
        }
    }

    pub fn with_psi(mut self, psi: DriftPotential) -> Self {
        self.psi = psi;
        self
    }

    pub fn with_beta_inv(mut self, beta_inv: f64) -> Self {
        self.beta_inv = beta_inv;
        self
    }

    pub fn with_eps(mut self, eps: EpsRule) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_solver(mut self, solver: InnerSolver) -> Self {
        self.inner_solver = solver;
        self
    }

    pub fn with_blur_correction(mut self, on: bool) -> Self {
        self.blur_correction = on;
        self
    }

    pub fn with_debias(mut self, on: bool) -> Self {
        self.debias = on;
        self
    }

    pub fn with_inner_tol(mut self, tol: f64) -> Self {
        self.inner_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.tau) {
            return Err(Error::InvalidInput(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.t_end >= self.tau * (1.0 - 1e-12)) {
            return Err(Error::InvalidInput(format!(
                "t_end = {} is shorter than tau = {}",
                self.t_end, self.tau
            )));
        }
        if !positive(self.beta_inv) {
            return Err(Error::InvalidInput("beta_inv must be positive".into()));
        }
        if !positive(self.inner_tol) || self.inner_max_iters == 0 {
            return Err(Error::InvalidInput(
                "inner tolerance and iteration cap must be positive".into(),
            ));
        }
        let eps_ok = match self.eps {
            EpsRule::MedianFraction { fraction: v, .. }
            | EpsRule::Fixed(v)
            | EpsRule::TauLinear(v)
            | EpsRule::TauSquared(v) => positive(v),
        };
        if self.inner_solver == InnerSolver::EntropicProximal && !eps_ok {
            return Err(Error::InvalidInput(
                "entropic parameter must be positive".into(),
            ));
        }
        if self.debias && self.blur_correction {
            return Err(Error::InvalidInput(
                "debias and blur correction are mutually exclusive".into(),
            ));
        }
        if self.debias && self.inner_solver != InnerSolver::EntropicProximal {
            return Err(Error::InvalidInput(
                "debias needs the entropic solver".into(),
            ));
        }
        Ok(())
    }

    /// Number of steps `ceil(t_end / tau)`.
    pub fn n_steps(&self) -> usize {
        (self.t_end / self.tau - 1e-9).ceil().max(1.0) as usize
    }

    /// Entropy weight actually used by the entropic solver at parameter `eps`.
    pub fn effective_beta_inv(&self, eps: f64) -> Result<f64> {
        if self.inner_solver == InnerSolver::EntropicProximal && self.blur_correction {
            let b = self.beta_inv - eps / (2.0 * self.tau);
            if !(b > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "blur correction needs eps < 2 tau beta_inv (eps = {eps:e}, tau = {:e})",
                    self.tau
                )));
            }
            Ok(b)
        } else {
            Ok(self.beta_inv)
        }
    }
}

/// Per-step quantities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub time: f64,
    /// `J_{k-1}(rho_k)`: the minimized objective (0 for the initial state).
    pub objective: f64,
    /// Transport term of the objective (regularized for entropic steps).
    pub transport: f64,
    /// `<C, pi>` of the plan found by the step.
    pub transport_raw: f64,
    /// Exact `T_c(rho_k, rho_{k-1})` when available.
    pub transport_exact: Option<f64>,
    /// Regularized self-transport `T_eps(rho_{k-1}, rho_{k-1})` of entropic
    /// steps: the transport term of the trivial competitor.
    pub transport_reference: Option<f64>,
    pub entropy: f64,
    pub drift: f64,
    /// `E + D` with the configured `beta^{-1}`.
    pub energy: f64,
    pub second_moment: f64,
    pub el_residual: Option<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub eps: f64,
}

/// Output of one proximal step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub density: DiscreteDensity,
    pub record: StepRecord,
    pub plan: TransportPlan,
}

/// Stateful stepper: caches the cost matrix, per-node data and the dual
/// potentials used to warm-start the next step.
#[derive(Debug)]
pub struct JkoStepper {
    config: JkoConfig,
    domain: Arc<DiscreteDomain>,
    cost: CostMatrix,
    psi_nodes: Vec<f64>,
    dist_sq_center: Vec<f64>,
    eps: f64,
    warm: Option<(Vec<f64>, Vec<f64>)>,
    el: Option<diagnostics::ElCache>,
    linear: Option<Vec<f64>>,
}

impl JkoStepper {
    pub fn new(config: JkoConfig, domain: Arc<DiscreteDomain>) -> Result<Self> {
        config.validate()?;
        if config.cost.dim() != domain.dim() {
            return Err(Error::InvalidInput(format!(
                "cost dimension {} does not match domain dimension {}",
                config.cost.dim(),
                domain.dim()
            )));
        }
        let cost = CostMatrix::from_cost(config.cost.as_ref(), domain.nodes(), domain.nodes())?;
        let psi_nodes: Vec<f64> = domain.nodes().iter().map(|x| config.psi.psi(x)).collect();
        let center = config.moment_center.clone().unwrap_or_else(|| {
            let b = domain.bounds();
            b.lower
                .iter()
                .zip(&b.upper)
                .map(|(l, u)| 0.5 * (l + u))
                .collect()
        });
        let metric = domain.metric().clone();
        let dist_sq_center = domain
            .nodes()
            .iter()
            .map(|x| metric.dist_sq(x, &center))
            .collect::<Result<Vec<_>>>()?;
        let eps = match config.inner_solver {
            InnerSolver::EntropicProximal => config.eps.resolve(config.tau, &cost),
            InnerSolver::MirrorDescent => 0.0,
        };
        config.effective_beta_inv(eps)?;
        let el = if config.el_diagnostics {
            Some(diagnostics::ElCache::new(
                config.cost.as_ref(),
                &domain,
                &default_el_fields(&domain),
                &config.psi,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            domain,
            cost,
            psi_nodes,
            dist_sq_center,
            eps,
            warm: None,
            el,
            linear: None,
        })
    }

    pub fn config(&self) -> &JkoConfig {
        &self.config
    }

    pub fn domain(&self) -> &Arc<DiscreteDomain> {
        &self.domain
    }

    pub fn cost_matrix(&self) -> &CostMatrix {
        &self.cost
    }

    /// Resolved entropic parameter (0 for mirror descent).
    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn energy_parts(&self, rho: &DiscreteDensity) -> (f64, f64, f64) {
        let e = entropy(rho);
        let d = crate::linalg::dot(&rho.masses(), &self.psi_nodes);
        (e, d, self.config.beta_inv * e + d)
    }

    pub fn second_moment(&self, rho: &DiscreteDensity) -> f64 {
        crate::linalg::dot(&rho.masses(), &self.dist_sq_center)
    }

    /// Record describing `rho` as the state at step `k` without a transport term.
    pub fn initial_record(&self, rho: &DiscreteDensity) -> StepRecord {
        let (e, d, energy) = self.energy_parts(rho);
        StepRecord {
            k: 0,
            time: 0.0,
            objective: energy,
            entropy: e,
            drift: d,
            energy,
            second_moment: self.second_moment(rho),
            eps: self.eps,
            ..Default::default()
        }
    }

    /// Performs one proximal step from `prev`.
    pub fn step(&mut self, prev: &DiscreteDensity) -> Result<StepOutput> {
        if !Arc::ptr_eq(prev.domain(), &self.domain) && prev.domain().len() != self.domain.len() {
            return Err(Error::InvalidInput(
                "density lives on a different grid".into(),
            ));
        }
        let q = prev.masses();
        let tau = self.config.tau;
        let w = self.domain.vol_weights();
        let (masses, plan, kkt, iterations, transport) = match self.config.inner_solver {
            InnerSolver::EntropicProximal => self.entropic_step(&q)?,
            InnerSolver::MirrorDescent => {
                let sol = inner::mirror_descent(
                    &self.cost,
                    &q,
                    w,
                    &self.psi_nodes,
                    tau,
                    self.config.beta_inv,
                    self.config.inner_tol,
                    self.config.inner_max_iters,
                )?;
                let density = DiscreteDensity::from_masses(self.domain.clone(), &sol.masses)?;
                if !(sol.residual < self.config.inner_tol) && !self.config.accept_best {
                    return Err(Error::JkoNoConvergence {
                        best: Box::new(density),
                        residual: sol.residual,
                    });
                }
                let plan = exact_ot(&self.cost, &density.masses(), &q)?;
                let t = plan.cost_value;
                (density.masses(), plan, sol.residual, sol.iterations, t)
            }
        };
        let density = DiscreteDensity::from_masses(self.domain.clone(), &masses)?;
        let max_mass = density.masses().iter().fold(0.0f64, |a, b| a.max(*b));
        if max_mass > 0.99 {
            log::warn!("step density concentrated in a single cell (mass {max_mass:.4})");
        }
        let (e, d, energy) = self.energy_parts(&density);
        let beta_eff = self.config.effective_beta_inv(self.eps)?;
        let objective = beta_eff * e + d + transport / tau;
        let transport_exact = if self.config.exact_diagnostics {
            match plan.solver {
                SolverTag::Exact => Some(plan.cost_value),
                SolverTag::Entropic { .. } => exact_ot(&self.cost, &density.masses(), &q)
                    .ok()
                    .map(|p| p.cost_value),
            }
        } else {
            None
        };
        let transport_reference = match plan.solver {
            SolverTag::Entropic { .. } if self.config.debias => Some(0.0),
            SolverTag::Entropic { eps } if self.config.exact_diagnostics => {
                entropic_self_transport(&self.cost, &q, eps, 1e-10, 200).ok()
            }
            SolverTag::Entropic { .. } => None,
            SolverTag::Exact => None,
        };
        let el_residual = match &self.el {
            Some(cache) => Some(cache.max_residual(
                &density,
                &plan,
                &self.config,
                self.eps,
                self.linear.as_deref(),
            )?),
            None => None,
        };
        let record = StepRecord {
            k: 0,
            time: 0.0,
            objective,
            transport,
            transport_raw: plan.cost_value,
            transport_exact,
            transport_reference,
            entropy: e,
            drift: d,
            energy,
            second_moment: self.second_moment(&density),
            el_residual,
            kkt_residual: kkt,
            iterations,
            eps: self.eps,
        };
        Ok(StepOutput {
            density,
            record,
            plan,
        })
    }

    #[allow(clippy::type_complexity)]
    fn entropic_step(&mut self, q: &[f64]) -> Result<(Vec<f64>, TransportPlan, f64, usize, f64)> {
        let tau = self.config.tau;
        let w = self.domain.vol_weights();
        let mut schedule = vec![self.eps];
        if self.config.eps.continuation() && self.warm.is_none() {
            schedule.insert(0, 2.0 * self.eps);
        }
        let mut total_iters = 0;
        let mut last = None;
        let mut reference = None;
        for eps in schedule {
            let psi = if self.config.debias {
                let st = self.self_transport(q, eps)?;
                let psi: Vec<f64> = self
                    .psi_nodes
                    .iter()
                    .zip(&st.1)
                    .map(|(p, l)| p + l / tau)
                    .collect();
                reference = Some(st);
                psi
            } else {
                self.psi_nodes.clone()
            };
            let problem = inner::EntropicStep {
                cost: &self.cost,
                q,
                w,
                psi: &psi,
                tau,
                beta_inv: self.config.effective_beta_inv(eps)?,
                eps,
            };
            let warm = self
                .warm
                .as_ref()
                .map(|(f, g)| (f.as_slice(), g.as_slice()));
            let sol = problem.solve(warm, self.config.inner_tol, self.config.inner_max_iters);
            total_iters += sol.iterations;
            if sol.fallbacks > 0 {
                log::debug!(
                    "entropic step used {} block-ascent fallbacks",
                    sol.fallbacks
                );
            }
            if sol.residual.is_finite() {
                self.warm = Some((sol.f.clone(), sol.g.clone()));
            } else {
                self.warm = None;
            }
            last = Some(sol);
        }
        let sol = last.expect("nonempty schedule");
        if !(sol.residual < self.config.inner_tol) {
            let masses: Vec<f64> = sol
                .masses
                .iter()
                .map(|m| if m.is_finite() { *m } else { 0.0 })
                .collect();
            let best =
                DiscreteDensity::from_masses(self.domain.clone(), &masses).unwrap_or_else(|_| {
                    DiscreteDensity::from_masses(self.domain.clone(), q)
                        .expect("valid previous step")
                });
            if self.config.accept_best && sol.residual.is_finite() {
                log::warn!(
                    "entropic step stalled at residual {:e}; keeping best iterate",
                    sol.residual
                );
            } else {
                self.warm = None;
                return Err(Error::JkoNoConvergence {
                    best: Box::new(best),
                    residual: sol.residual,
                });
            }
        }
        let n = q.len();
        let mut raw = 0.0;
        let mut ent = 0.0;
        for (k, p) in sol.plan.iter().enumerate() {
            if *p > 0.0 {
                raw += p * self.cost.entries()[k];
                ent += p * p.ln();
            }
        }
        let regularized = raw + self.eps * ent;
        let transport = match &reference {
            Some((value, linear)) => {
                regularized - value
                    + linear
                        .iter()
                        .zip(sol.masses.iter().zip(q))
                        .map(|(l, (m, qi))| l * (m - qi))
                        .sum::<f64>()
            }
            None => regularized,
        };
        self.linear = reference.map(|r| r.1);
        let plan = TransportPlan {
            rows: n,
            cols: n,
            coupling: sol.plan,
            cost_value: raw,
            solver: SolverTag::Entropic { eps: self.eps },
            duals: (sol.f, sol.g),
            regularized_value: Some(regularized),
            debiased_value: self.config.debias.then_some(transport),
            iterations: total_iters,
            degenerate: false,
            certificate_residual: f64::NAN,
        };
        Ok((sol.masses, plan, sol.residual, total_iters, transport))
    }

    /// Self-transport value of `q` and the linear correction
    /// `-(f_q + g_q) / 2` at parameter `eps`.
    fn self_transport(&self, q: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
        let st = entropic_self_transport_potentials(&self.cost, q, eps, 1e-10, 200)?;
        let linear =
            st.f.iter()
                .zip(&st.g)
                .map(|(f, g)| -0.5 * (f + g))
                .collect();
        Ok((st.value, linear))
    }

    /// `J(rho) = beta^{-1} E + D + T(rho, prev) / tau` with the transport
    /// term of the configured solver (entropic at this stepper's `eps`,
    /// debiased when enabled, exact for mirror descent). The entropy weight
    /// includes the blur correction when enabled.
    pub fn objective(&self, rho: &DiscreteDensity, prev: &DiscreteDensity) -> Result<f64> {
        let (e, d, _) = self.energy_parts(rho);
        let t = match self.config.inner_solver {
            InnerSolver::EntropicProximal => {
                let opts = EntropicOptions {
                    tol_marginal: 1e-12,
                    force_log_domain: true,
                    ..Default::default()
                };
                let (m, q) = (rho.masses(), prev.masses());
                let t = entropic_ot_with(&self.cost, &m, &q, self.eps, &opts, None)?
                    .regularized_value
                    .expect("entropic plans carry a regularized value");
                if self.config.debias {
                    let (value, linear) = self.self_transport(&q, self.eps)?;
                    t - value
                        + linear
                            .iter()
                            .zip(m.iter().zip(&q))
                            .map(|(l, (a, b))| l * (a - b))
                            .sum::<f64>()
                } else {
                    t
                }
            }
            InnerSolver::MirrorDescent => {
                exact_ot(&self.cost, &rho.masses(), &prev.masses())?.cost_value
            }
        };
        Ok(self.config.effective_beta_inv(self.eps)? * e + d + t / self.config.tau)
    }
}

/// `J_k(rho)` for the proximal problem anchored at `rho_prev`.
pub fn jko_objective(
    rho: &DiscreteDensity,
    rho_prev: &DiscreteDensity,
    config: &JkoConfig,
) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.el_diagnostics = false;
    JkoStepper::new(cfg, rho.domain().clone())?.objective(rho, rho_prev)
}

/// One proximal step from `rho_prev`.
pub fn jko_step(rho_prev: &DiscreteDensity, config: &JkoConfig) -> Result<StepOutput> {
    JkoStepper::new(config.clone(), rho_prev.domain().clone())?.step(rho_prev)
}

#[derive(Debug, Clone)]
pub struct FlowFailure {
    /// Index of the step that could not be computed.
    pub step: usize,
    pub message: String,
}

/// Densities `rho_0, ..., rho_K` and their per-step records.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub config: JkoConfig,
    pub steps: Vec<DiscreteDensity>,
    pub records: Vec<StepRecord>,
    pub failure: Option<FlowFailure>,
}

impl FlowTrajectory {
    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn last(&self) -> &DiscreteDensity {
        self.steps
            .last()
            .expect("trajectory holds the initial density")
    }

    /// Piecewise-constant interpolant: `rho_k` on `((k-1) tau, k tau]`.
    pub fn interpolant(&self, t: f64) -> &DiscreteDensity {
        if t <= 0.0 {
            return &self.steps[0];
        }
        let k = (t / self.config.tau - 1e-9).ceil().max(0.0) as usize;
        &self.steps[k.min(self.steps.len() - 1)]
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.steps.len())
            .map(|k| k as f64 * self.config.tau)
            .collect()
    }

    /// Steps where `E + D` increased by more than `tol`.
    pub fn descent_violations(&self, tol: f64) -> Vec<usize> {
        self.records
            .windows(2)
            .filter(|w| w[1].energy > w[0].energy + tol)
            .map(|w| w[1].k)
            .collect()
    }

    /// Writes `k,t,J,E,D,M,T,T_raw,T_exact,EL,kkt,iterations`.
    pub fn write_diagnostics_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "k",
            "t",
            "J",
            "E",
            "D",
            "M",
            "T",
            "T_raw",
            "T_exact",
            "EL",
            "kkt",
            "iterations",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
        for r in &self.records {
            w.write_record(&[
                r.k.to_string(),
                format!("{:.12e}", r.time),
                format!("{:.12e}", r.objective),
                format!("{:.12e}", r.entropy),
                format!("{:.12e}", r.drift),
                format!("{:.12e}", r.second_moment),
                format!("{:.12e}", r.transport),
                format!("{:.12e}", r.transport_raw),
                opt(r.transport_exact),
                opt(r.el_residual),
                format!("{:.3e}", r.kkt_residual),
                r.iterations.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `step_<k>.csv` for every step into `dir`.
    pub fn write_steps(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, rho) in self.steps.iter().enumerate() {
            let file = std::fs::File::create(dir.join(format!("step_{k:05}.csv")))?;
            crate::measures::write_density_csv(rho, std::io::BufWriter::new(file))?;
        }
        Ok(())
    }
}

/// Runs `ceil(t_end / tau)` proximal steps from `rho0`. A failing step ends
/// the run; the partial trajectory is returned with the failure recorded.
pub fn run_flow(rho0: &DiscreteDensity, config: &JkoConfig) -> Result<FlowTrajectory> {
    let mut stepper = JkoStepper::new(config.clone(), rho0.domain().clone())?;
    let k_max = config.n_steps();
    let mut steps = vec![rho0.clone()];
    let mut records = vec![stepper.initial_record(rho0)];
    let mut failure = None;
    for k in 1..=k_max {
        match stepper.step(&steps[k - 1]) {
            Ok(out) => {
                let mut rec = out.record;
                rec.k = k;
                rec.time = k as f64 * config.tau;
                records.push(rec);
                steps.push(out.density);
            }
            Err(e) => {
                log::warn!("flow stopped at step {k}: {e}");
                failure = Some(FlowFailure {
                    step: k,
                    message: e.to_string(),
                });
                break;
            }
        }
    }
    Ok(FlowTrajectory {
        config: config.clone(),
        steps,
        records,
        failure,
    })
}

/// Convenience for callers that do not keep a drift potential around.
pub fn energy(rho: &DiscreteDensity, config: &JkoConfig) -> f64 {
    config.beta_inv * entropy(rho) + drift(rho, &config.psi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quadratic_cost, EuclideanMetric};

    fn grid(n: usize) -> Arc<DiscreteDomain> {
        Arc::new(DiscreteDomain::interval(0.0, 1.0, n, Arc::new(EuclideanMetric::new(1))).unwrap())
    }

    fn bump(d: &Arc<DiscreteDomain>) -> DiscreteDensity {
        DiscreteDensity::from_fn(d.clone(), |x| (-(x[0] - 0.3).powi(2) / 0.02).exp() + 0.05)
            .unwrap()
    }

    #[test]
    fn config_validation() {
        let c = quadratic_cost(1);
        assert!(JkoConfig::new(0.0, 1.0, c.clone()).validate().is_err());
        assert!(JkoConfig::new(0.1, 0.05, c.clone()).validate().is_err());
        assert!(JkoConfig::new(0.1, 0.1, c.clone())
            .with_eps(EpsRule::Fixed(0.0))
            .validate()
            .is_err());
        assert_eq!(JkoConfig::new(0.1, 0.1, c.clone()).n_steps(), 1);
        assert_eq!(JkoConfig::new(0.1, 0.25, c).n_steps(), 3);
    }

    #[test]
    fn objective_at_previous_state() {
        let d = grid(16);
        let u = DiscreteDensity::uniform(d.clone());
        let cfg =
            JkoConfig::new(0.1, 0.1, quadratic_cost(1)).with_solver(InnerSolver::MirrorDescent);
        // Exact transport: J(rho_prev) = E + D, zero for the uniform density.
        assert!(jko_objective(&u, &u, &cfg).unwrap().abs() < 1e-14);
        let rho = bump(&d);
        let j = jko_objective(&rho, &rho, &cfg).unwrap();
        assert!((j - entropy(&rho)).abs() < 1e-14);
    }

    #[test]
    fn step_preserves_mass_and_descends() {
        let d = grid(32);
        let rho = bump(&d);
        let cfg = JkoConfig::new(1e-2, 1e-2, quadratic_cost(1)).with_eps(EpsRule::TauSquared(25.0));
        let out = jko_step(&rho, &cfg).unwrap();
        assert!((out.density.mass() - 1.0).abs() < 1e-12);
        assert!(out.density.values().iter().all(|v| *v >= 0.0));
        assert!(out.record.kkt_residual < cfg.inner_tol);
        assert!(out.record.energy <= entropy(&rho));
        let stepper = JkoStepper::new(cfg.clone(), d).unwrap();
        let j_new = stepper.objective(&out.density, &rho).unwrap();
        let j_old = stepper.objective(&rho, &rho).unwrap();
        assert!(j_new <= j_old + cfg.inner_tol);
        assert!((j_new - out.record.objective).abs() < 1e-7);
    }

    #[test]
    fn debiased_step_keeps_uniform_fixed() {
        let d = grid(24);
        let u = DiscreteDensity::uniform(d.clone());
        let plain =
            JkoConfig::new(1e-2, 2e-2, quadratic_cost(1)).with_eps(EpsRule::TauSquared(25.0));
        let biased = run_flow(&u, &plain).unwrap();
        assert!(biased.last().l1_distance(&u).unwrap() > 1e-4);
        let cfg = plain.with_debias(true);
        let flow = run_flow(&u, &cfg).unwrap();
        assert!(flow.last().l1_distance(&u).unwrap() < 1e-8);
        assert!(flow.records[1].transport.abs() < 1e-10);
    }

    #[test]
    fn debiased_step_matches_its_objective() {
        let d = grid(32);
        let rho = bump(&d);
        let cfg = JkoConfig::new(1e-2, 1e-2, quadratic_cost(1))
            .with_eps(EpsRule::TauSquared(25.0))
            .with_debias(true);
        let out = jko_step(&rho, &cfg).unwrap();
        assert!(out.record.kkt_residual < cfg.inner_tol);
        let stepper = JkoStepper::new(cfg.clone(), d).unwrap();
        let j_new = stepper.objective(&out.density, &rho).unwrap();
        let j_old = stepper.objective(&rho, &rho).unwrap();
        assert!((j_old - entropy(&rho)).abs() < 1e-9);
        assert!(j_new <= j_old + cfg.inner_tol);
        assert!((j_new - out.record.objective).abs() < 1e-7);
        let plain = jko_step(&rho, &cfg.clone().with_debias(false)).unwrap();
        assert!(out.record.el_residual.unwrap() < 1.5 * plain.record.el_residual.unwrap());
        assert!(JkoConfig::new(0.1, 0.1, quadratic_cost(1))
            .with_debias(true)
            .with_blur_correction(true)
            .validate()
            .is_err());
    }

    #[test]
    fn large_tau_reaches_uniform() {
        let d = grid(24);
        let rho = bump(&d);
        let cfg = JkoConfig::new(1e4, 1e4, quadratic_cost(1)).with_eps(EpsRule::Fixed(1e-3));
        let out = jko_step(&rho, &cfg).unwrap();
        let u = DiscreteDensity::uniform(d);
        assert!(out.density.l1_distance(&u).unwrap() < 1e-3);
    }

    #[test]
    fn small_tau_stays_close() {
        let d = grid(32);
        let rho = bump(&d);
        let mut prev = f64::INFINITY;
        for tau in [1e-1, 1e-2, 1e-3] {
            let cfg =
                JkoConfig::new(tau, tau, quadratic_cost(1)).with_eps(EpsRule::TauSquared(25.0));
            let out = jko_step(&rho, &cfg).unwrap();
            let dist = out.density.l1_distance(&rho).unwrap();
            assert!(dist < prev, "tau {tau}: {dist} vs {prev}");
            prev = dist;
        }
    }

    #[test]
    fn flow_bookkeeping() {
        let d = grid(16);
        let rho = bump(&d);
        let cfg = JkoConfig::new(0.01, 0.01, quadratic_cost(1));
        let traj = run_flow(&rho, &cfg).unwrap();
        assert_eq!(traj.steps.len(), 2);
        let cfg = JkoConfig::new(0.01, 0.03, quadratic_cost(1));
        let traj = run_flow(&rho, &cfg).unwrap();
        assert!(traj.is_complete());
        assert_eq!(traj.steps.len(), 4);
        assert!(std::ptr::eq(traj.interpolant(0.0), &traj.steps[0]));
        assert!(std::ptr::eq(traj.interpolant(0.015), &traj.steps[2]));
        assert!(std::ptr::eq(traj.interpolant(0.01), &traj.steps[1]));
        assert!(traj.descent_violations(cfg.inner_tol).is_empty());
        let mut buf = Vec::new();
        traj.write_diagnostics_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn mirror_descent_accepts_best() {
        let d = grid(12);
        let rho = bump(&d);
        let mut cfg =
            JkoConfig::new(0.05, 0.05, quadratic_cost(1)).with_solver(InnerSolver::MirrorDescent);
        cfg.inner_max_iters = 300;
        match jko_step(&rho, &cfg) {
            Ok(out) => assert!(out.record.kkt_residual < cfg.inner_tol),
            Err(Error::JkoNoConvergence { best, .. }) => assert!((best.mass() - 1.0).abs() < 1e-12),
            Err(e) => panic!("{e}"),
        }
        cfg.accept_best = true;
        let out = jko_step(&rho, &cfg).unwrap();
        let j_new = jko_objective(&out.density, &rho, &cfg).unwrap();
        assert!(j_new <= jko_objective(&rho, &rho, &cfg).unwrap());
    }
}
