use std::fmt;

use jko_core::geometry::{check_a1_a2, estimate_comparability, A1Status};
use jko_core::jko::{InnerSolver, JkoStepper};
use jko_core::linalg::{max_eigenvalue, min_eigenvalue};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Comparability ratio `lambda / Lambda` below which the lower bound is
/// reported as degenerate.
const LAMBDA_RATIO_WARN: f64 = 1e-2;
/// Relative eigenvalue floor of a Bregman Hessian on the grid.
const HESSIAN_RATIO_WARN: f64 = 1e-2;
/// Entropic parameter, relative to the cost between adjacent nodes, below
/// which the regularized plan cannot move mass by a full cell per step.
const EPS_GRID_WARN: f64 = 0.25;
const A2_SAMPLES: usize = 64;
const COMPARABILITY_SAMPLES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub level: Level,
    pub message: String,
}

impl Diagnostic {
    fn info(message: impl Into<String>) -> Self {
        Self {
            level: Level::Info,
            message: message.into(),
        }
    }

    fn warning(message: impl Into<String>) -> Self {
        Self {
            level: Level::Warning,
            message: message.into(),
        }
    }

    fn error(message: impl Into<String>) -> Self {
        Self {
            level: Level::Error,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.level {
            Level::Info => "info",
            Level::Warning => "warning",
            Level::Error => "error",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.level == Level::Error)
}

/// Resolves every name in the config, checks the nondegeneracy condition on
/// sample pairs and estimates the comparability constants. Stops at the first
/// resolution error.
pub fn validate_config(config: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if let Err(e) = config.check_shape() {
        out.push(Diagnostic::error(format!("{e:#}")));
        return out;
    }
    let resolved = (|| -> anyhow::Result<_> {
        let reg = config.registry()?;
        let cost = config.resolve_cost(&reg)?;
        let metric = config.resolve_metric(&reg)?;
        config.resolve_psi()?;
        let bounds = config.bounds()?;
        let domain = config.build_domain(&reg, config.sweep.resolutions[0])?;
        config.initial_density(domain.clone())?;
        for &tau in &config.sweep.taus {
            config.jko_config(&reg, tau)?;
        }
        Ok((cost, metric, bounds, domain))
    })();
    let (cost, metric, bounds, domain) = match resolved {
        Ok(v) => v,
        Err(e) => {
            out.push(Diagnostic::error(format!("{e:#}")));
            return out;
        }
    };
    out.push(Diagnostic::info(format!(
        "cost {}, metric {}, {} sweep points",
        cost.name(),
        metric.name(),
        config.sweep.taus.len() * config.sweep.resolutions.len()
    )));

    let mut rng = StdRng::seed_from_u64(config.seed);
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..A2_SAMPLES)
        .map(|_| (bounds.sample(&mut rng), bounds.sample(&mut rng)))
        .collect();
    match check_a1_a2(cost.as_ref(), &samples) {
        Ok(r) if r.a2_holds() => out.push(Diagnostic::info(format!(
            "nondegeneracy holds on {} pairs (min |det c_xy| {:.3e}); injectivity {}",
            r.pairs.len(),
            r.min_abs_det,
            match r.a1 {
                A1Status::GlobalBregman => "holds globally (Bregman cost)",
                A1Status::NotVerified => "not verified",
            }
        ))),
        Ok(r) => out.push(Diagnostic::warning(format!(
            "mixed Hessian of the cost is singular on {} of {} sampled pairs",
            r.flagged,
            r.pairs.len()
        ))),
        Err(e) => out.push(Diagnostic::warning(format!(
            "nondegeneracy check failed: {e}"
        ))),
    }

    if let Some(phi) = cost.bregman_potential() {
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for x in domain.nodes() {
            if let Ok(h) = phi.hessian(x) {
                lo = lo.min(min_eigenvalue(&h));
                hi = hi.max(max_eigenvalue(&h));
            }
        }
        if !(lo > HESSIAN_RATIO_WARN * hi) {
            out.push(Diagnostic::warning(format!(
                "D^2 phi degenerates on the grid (eigenvalues in [{lo:.3e}, {hi:.3e}]); the uniform ellipticity the convergence theory assumes is at risk"
            )));
        }
    }

    for &n in &config.sweep.resolutions {
        if let Err(e) = check_eps_scale(config, n, &mut out) {
            out.push(Diagnostic::warning(format!(
                "entropic scale check failed at resolution {n}: {e:#}"
            )));
        }
    }

    match estimate_comparability(
        cost.as_ref(),
        metric.as_ref(),
        &bounds,
        COMPARABILITY_SAMPLES,
        config.seed,
    ) {
        Ok(c) => {
            out.push(Diagnostic::info(format!(
                "comparability estimate lambda {:.4e}, Lambda {:.4e} from {} pairs{}",
                c.lambda_hat,
                c.big_lambda_hat,
                c.n_used,
                if c.approximate_distance {
                    " (approximate distance)"
                } else {
                    ""
                }
            )));
            if !(c.lambda_hat > LAMBDA_RATIO_WARN * c.big_lambda_hat) {
                out.push(Diagnostic::warning(format!(
                    "lambda estimate {:.3e} is near 0 relative to Lambda {:.3e}; the comparability hypothesis lambda d^2 <= c is at risk",
                    c.lambda_hat, c.big_lambda_hat
                )));
            }
        }
        Err(e) => out.push(Diagnostic::warning(format!(
            "comparability estimate failed: {e}"
        ))),
    }
    out
}

fn check_eps_scale(
    config: &ExperimentConfig,
    n: usize,
    out: &mut Vec<Diagnostic>,
) -> anyhow::Result<()> {
    let reg = config.registry()?;
    let domain = config.build_domain(&reg, n)?;
    let shape = domain.shape().to_vec();
    for &tau in &config.sweep.taus {
        let mut cfg = config.jko_config(&reg, tau)?;
        if cfg.inner_solver != InnerSolver::EntropicProximal {
            return Ok(());
        }
        cfg.el_diagnostics = false;
        let stepper = JkoStepper::new(cfg, domain.clone())?;
        let cost = stepper.cost_matrix();
        let mut adjacent: Vec<f64> = (0..domain.len())
            .filter_map(|k| {
                let mut idx = domain.multi_index(k);
                (idx[0] + 1 < shape[0]).then(|| {
                    idx[0] += 1;
                    cost.get(k, domain.index(&idx))
                })
            })
            .collect();
        if adjacent.is_empty() {
            continue;
        }
        adjacent.sort_by(f64::total_cmp);
        let scale = adjacent[adjacent.len() / 2];
        let eps = stepper.eps();
        if eps < EPS_GRID_WARN * scale {
            out.push(Diagnostic::warning(format!(
                "eps {eps:.3e} at tau {tau:e} is below {EPS_GRID_WARN} x the adjacent-node cost {scale:.3e} at resolution {n}; the entropic step will barely move mass"
            )));
        }
    }
    Ok(())
}
