use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use jko_core::fokker_planck::{FdOptions, TimeScheme};
use jko_core::geometry::{
    BoxBounds, ConvexPotential, CostFunction, EuclideanMetric, HessianMetric, InducedMetric,
    MetricModel, PotentialFamily, Registry,
};
use jko_core::jko::{EpsRule, InnerSolver, JkoConfig};
use jko_core::measures::{read_density_csv, DiscreteDensity, DiscreteDomain, DriftPotential};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// One experiment: a domain, an initial density, a flow definition, an
/// oracle and the `(tau, resolution)` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub domain: DomainSpec,
    #[serde(default)]
    pub potentials: Vec<PotentialDecl>,
    pub initial: InitialSpec,
    pub cost: String,
    #[serde(default)]
    pub psi: PsiSpec,
    pub jko: JkoSpec,
    pub oracle: OracleSpec,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `euclidean`, `induced` (by the cost), or `hessian:<potential>`.
    #[serde(default = "default_metric")]
    pub metric: String,
}

fn default_metric() -> String {
    "euclidean".into()
}

/// A user-declared separable polynomial potential `sum_k c_k x_a^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialDecl {
    pub name: String,
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Uniform,
    /// Isotropic Gaussian restricted to the box.
    Gaussian {
        mean: Vec<f64>,
        variance: f64,
    },
    /// `1 + amplitude * prod_a cos(pi s_a)` with `s` the normalized coordinate.
    Cosine {
        amplitude: f64,
    },
    /// Density CSV on the sweep grid.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsiSpec {
    #[default]
    Zero,
    Quadratic {
        center: Vec<f64>,
        k: f64,
    },
    Polynomial {
        coefficients: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JkoSpec {
    pub t_end: f64,
    #[serde(default = "one")]
    pub beta_inv: f64,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub eps: EpsSpec,
    #[serde(default)]
    pub blur_correction: bool,
    /// Subtract the entropic self-transport of the previous step.
    #[serde(default)]
    pub debias: bool,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_inner_max_iters")]
    pub inner_max_iters: usize,
    #[serde(default)]
    pub accept_best: bool,
    /// Exact transport diagnostics between consecutive steps.
    #[serde(default = "yes")]
    pub exact_diagnostics: bool,
    /// Write one density CSV per step.
    #[serde(default)]
    pub write_steps: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_inner_tol() -> f64 {
    1e-8
}

fn default_inner_max_iters() -> usize {
    500
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverSpec {
    #[default]
    Entropic,
    MirrorDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsSpec {
    MedianFraction {
        value: f64,
        #[serde(default = "yes")]
        continuation: bool,
    },
    Fixed {
        value: f64,
    },
    TauLinear {
        value: f64,
    },
    TauSquared {
        value: f64,
    },
}

impl Default for EpsSpec {
    fn default() -> Self {
        EpsSpec::MedianFraction {
            value: 1e-2,
            continuation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    Fd {
        dt: f64,
        #[serde(default)]
        scheme: SchemeSpec,
        #[serde(default)]
        upwind: bool,
    },
    /// Closed-form Ornstein-Uhlenbeck solution: `psi = |x|^2 / 2`, `beta = 1`,
    /// Gaussian initial density.
    Ou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    #[default]
    Implicit,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub taus: Vec<f64>,
    /// Nodes per axis.
    pub resolutions: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg =
            Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let InitialSpec::File { path } = &mut cfg.initial {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn dim(&self) -> usize {
        self.domain.lower.len()
    }

    pub fn registry(&self) -> anyhow::Result<Registry> {
        let mut reg = Registry::new();
        for p in &self.potentials {
            reg.declare(
                p.name.clone(),
                PotentialFamily::Polynomial {
                    coefficients: p.coefficients.clone(),
                },
            )?;
        }
        Ok(reg)
    }

    pub fn bounds(&self) -> anyhow::Result<BoxBounds> {
        Ok(BoxBounds::new(
            self.domain.lower.clone(),
            self.domain.upper.clone(),
        )?)
    }

    pub fn resolve_cost(&self, reg: &Registry) -> anyhow::Result<Arc<dyn CostFunction>> {
        Ok(reg.cost(&self.cost, self.dim())?)
    }

    pub fn resolve_metric(&self, reg: &Registry) -> anyhow::Result<Arc<dyn MetricModel>> {
        let name = self.domain.metric.as_str();
        Ok(match name {
            "euclidean" => Arc::new(EuclideanMetric::new(self.dim())),
            "induced" => Arc::new(InducedMetric::new(self.resolve_cost(reg)?)),
            other => {
                let Some(p) = other.strip_prefix("hessian:") else {
                    bail!("unknown metric '{other}'");
                };
                let potential: Arc<dyn ConvexPotential> = reg.potential(p, self.dim())?;
                Arc::new(HessianMetric::new(potential))
            }
        })
    }

    pub fn resolve_psi(&self) -> anyhow::Result<DriftPotential> {
        Ok(match &self.psi {
            PsiSpec::Zero => DriftPotential::zero(),
            PsiSpec::Quadratic { center, k } => {
                if center.len() != self.dim() {
                    bail!(
                        "psi center has {} coordinates, domain has {}",
                        center.len(),
                        self.dim()
                    );
                }
                DriftPotential::quadratic(center.clone(), *k)
            }
            PsiSpec::Polynomial { coefficients } => {
                DriftPotential::separable_polynomial(coefficients.clone())
            }
        })
    }

    pub fn build_domain(
        &self,
        reg: &Registry,
        resolution: usize,
    ) -> anyhow::Result<Arc<DiscreteDomain>> {
        let shape = vec![resolution; self.dim()];
        Ok(Arc::new(DiscreteDomain::new(
            self.bounds()?,
            &shape,
            self.resolve_metric(reg)?,
        )?))
    }

    pub fn initial_density(&self, domain: Arc<DiscreteDomain>) -> anyhow::Result<DiscreteDensity> {
        let (lo, hi) = (self.domain.lower.clone(), self.domain.upper.clone());
        Ok(match &self.initial {
            InitialSpec::Uniform => DiscreteDensity::uniform(domain),
            InitialSpec::Gaussian { mean, variance } => {
                if mean.len() != self.dim() || !(*variance > 0.0) {
                    bail!("gaussian initial density needs a {}-dimensional mean and positive variance", self.dim());
                }
                DiscreteDensity::from_fn(domain, |x| {
                    let r2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
                    (-r2 / (2.0 * variance)).exp()
                })?
            }
            InitialSpec::Cosine { amplitude } => {
                if amplitude.abs() >= 1.0 {
                    bail!("cosine amplitude must lie in (-1, 1)");
                }
                DiscreteDensity::from_fn(domain, |x| {
                    let p: f64 = (0..x.len())
                        .map(|a| (std::f64::consts::PI * (x[a] - lo[a]) / (hi[a] - lo[a])).cos())
                        .product();
                    1.0 + amplitude * p
                })?
            }
            InitialSpec::File { path } => {
                let file = std::fs::File::open(path)
                    .with_context(|| format!("opening {}", path.display()))?;
                read_density_csv(domain, std::io::BufReader::new(file))?
            }
        })
    }

    pub fn jko_config(&self, reg: &Registry, tau: f64) -> anyhow::Result<JkoConfig> {
        let j = &self.jko;
        let mut cfg = JkoConfig::new(tau, j.t_end, self.resolve_cost(reg)?)
            .with_psi(self.resolve_psi()?)
            .with_beta_inv(j.beta_inv)
            .with_eps(match j.eps {
                EpsSpec::MedianFraction {
                    value,
                    continuation,
                } => EpsRule::MedianFraction {
                    fraction: value,
                    continuation,
                },
                EpsSpec::Fixed { value } => EpsRule::Fixed(value),
                EpsSpec::TauLinear { value } => EpsRule::TauLinear(value),
                EpsSpec::TauSquared { value } => EpsRule::TauSquared(value),
            })
            .with_solver(match j.solver {
                SolverSpec::Entropic => InnerSolver::EntropicProximal,
                SolverSpec::MirrorDescent => InnerSolver::MirrorDescent,
            })
            .with_blur_correction(j.blur_correction)
            .with_debias(j.debias)
            .with_inner_tol(j.inner_tol);
        cfg.inner_max_iters = j.inner_max_iters;
        cfg.accept_best = j.accept_best;
        cfg.exact_diagnostics = j.exact_diagnostics;
        cfg.cost_name = self.cost.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fd_options(&self) -> Option<FdOptions> {
        match self.oracle {
            OracleSpec::Fd { dt, scheme, upwind } => {
                let mut o = FdOptions::new(dt, self.jko.t_end);
                o.beta_inv = self.jko.beta_inv;
                o.upwind = upwind;
                o.scheme = match scheme {
                    SchemeSpec::Implicit => TimeScheme::ImplicitEuler,
                    SchemeSpec::Explicit => TimeScheme::ExplicitEuler,
                };
                o.store_every = usize::MAX;
                Some(o)
            }
            OracleSpec::Ou => None,
        }
    }

    /// Structural checks that need no name resolution.
    pub fn check_shape(&self) -> anyhow::Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if self.dim() == 0 || self.domain.upper.len() != self.dim() {
            bail!("domain bounds must be nonempty and of equal length");
        }
        if self.sweep.taus.is_empty() || self.sweep.resolutions.is_empty() {
            bail!("sweep lists must be nonempty");
        }
        if let Some(t) = self.sweep.taus.iter().find(|t| !(**t > 0.0)) {
            bail!("tau values must be positive, got {t}");
        }
        if let Some(n) = self.sweep.resolutions.iter().find(|n| **n < 2) {
            bail!("resolutions must be at least 2, got {n}");
        }
        if !(self.jko.t_end > 0.0) {
            bail!("t_end must be positive");
        }
        if let OracleSpec::Fd { dt, .. } = self.oracle {
            if !(dt > 0.0) {
                bail!("oracle dt must be positive");
            }
        }
        Ok(())
    }

    /// Creates the output directory and checks it accepts files.
    pub fn prepare_output(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating {}", self.output_dir.display()))?;
        let probe = self.output_dir.join(".write_probe");
        std::fs::write(&probe, b"").map_err(|e| {
            anyhow!(
                "output directory {} is not writable: {e}",
                self.output_dir.display()
            )
        })?;
        std::fs::remove_file(probe)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const HEAT: &str = r#"
schema_version = 1
name = "heat"
output_dir = "out"
cost = "quadratic"

[domain]
lower = [0.0]
upper = [1.0]

[initial]
kind = "cosine"
amplitude = 0.5

[jko]
t_end = 0.05
eps = { rule = "tau_squared", value = 25.0 }

[oracle]
kind = "fd"
dt = 1e-4

[sweep]
taus = [0.01]
resolutions = [32]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(HEAT).unwrap();
        assert_eq!(cfg.psi, PsiSpec::Zero);
        assert_eq!(cfg.jko.eps, EpsSpec::TauSquared { value: 25.0 });
        assert_eq!(cfg.jko.inner_tol, 1e-8);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = HEAT.replace("cost = \"quadratic\"", "cost = \"quadratic\"\ncots = 1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn builds_the_flow_inputs() {
        let cfg = ExperimentConfig::from_toml(HEAT).unwrap();
        cfg.check_shape().unwrap();
        let reg = cfg.registry().unwrap();
        let d = cfg.build_domain(&reg, 32).unwrap();
        let rho = cfg.initial_density(d).unwrap();
        assert!((rho.mass() - 1.0).abs() < 1e-12);
        assert!(rho.values()[0] > rho.values()[31]);
        let j = cfg.jko_config(&reg, 0.01).unwrap();
        assert!(
            (j.eps.resolve(
                0.01,
                &jko_core::transport::CostMatrix::new(1, 1, vec![0.0]).unwrap()
            ) - 25e-4)
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn shape_errors() {
        let mut cfg = ExperimentConfig::from_toml(HEAT).unwrap();
        cfg.sweep.taus.clear();
        assert!(cfg.check_shape().is_err());
        let mut cfg = ExperimentConfig::from_toml(HEAT).unwrap();
        cfg.schema_version = 9;
        assert!(cfg.check_shape().is_err());
    }
}
