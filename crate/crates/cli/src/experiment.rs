use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use jko_core::fokker_planck::{
    fd_solve, neumann_dictionary, ou_analytic, weak_residual_max, FdSolution, TestFunction,
    TimeProfile,
};
use jko_core::geometry::Registry;
use jko_core::jko::{run_flow, FlowTrajectory};
use jko_core::measures::{write_density_csv, DiscreteDensity, DiscreteDomain};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InitialSpec, OracleSpec, PsiSpec, SCHEMA_VERSION};

/// Fraction of `t_end` covered by the time profile of the weak residual.
const WEAK_SUPPORT: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub package: String,
    pub version: String,
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
}

impl Stamp {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            experiment: config.name.clone(),
            seed: config.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// Metrics of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `int |rho_tau(t_end) - rho_oracle(t_end)| dVol_g`.
    pub l1_error: f64,
    /// Euclidean norm of the mean difference.
    pub mean_error: f64,
    /// Largest entry of the covariance difference.
    pub variance_error: f64,
    /// `max_k max(0, (E+D)(rho_{k+1}) - (E+D)(rho_k))`.
    pub max_descent_violation: f64,
    pub max_el_residual: f64,
    /// Largest weak-form residual over the test dictionary.
    pub weak_residual: f64,
    /// `max_zeta |int zeta d(rho_tau - rho_oracle)|` over the dictionary.
    pub weak_surrogate: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tau: f64,
    pub resolution: usize,
    pub status: RowStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stamp: Stamp,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn failed_rows(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.status == RowStatus::Failed)
            .count()
    }

    pub fn write_json(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "tau",
            "resolution",
            "status",
            "reason",
            "l1_error",
            "mean_error",
            "variance_error",
            "max_descent_violation",
            "max_el_residual",
            "weak_residual",
            "weak_surrogate",
            "steps",
        ])?;
        for r in &self.rows {
            let mut rec = vec![
                format!("{:e}", r.tau),
                r.resolution.to_string(),
                match r.status {
                    RowStatus::Ok => "ok".into(),
                    RowStatus::Failed => "failed".into(),
                },
                r.reason.clone().unwrap_or_default(),
            ];
            match &r.metrics {
                Some(m) => rec.extend(
                    [
                        m.l1_error,
                        m.mean_error,
                        m.variance_error,
                        m.max_descent_violation,
                        m.max_el_residual,
                        m.weak_residual,
                        m.weak_surrogate,
                    ]
                    .iter()
                    .map(|v| format!("{v:.6e}"))
                    .chain([m.steps.to_string()]),
                ),
                None => rec.extend(std::iter::repeat_n(String::new(), 8)),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wall time per sweep point, kept apart from the report so that reports of
/// identical configs are byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub tau: f64,
    pub resolution: usize,
    pub seconds: f64,
}

pub fn write_timings(timings: &[Timing], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["tau", "resolution", "wall_seconds"])?;
    for t in timings {
        w.write_record([
            format!("{:e}", t.tau),
            t.resolution.to_string(),
            format!("{:.3}", t.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reference solution at `t_end` on one grid.
pub struct OracleSolution {
    pub resolution: usize,
    pub domain: Arc<DiscreteDomain>,
    pub final_density: DiscreteDensity,
    pub fd: Option<FdSolution>,
}

/// Solves the oracle for one resolution.
pub fn oracle_solution(
    config: &ExperimentConfig,
    reg: &Registry,
    resolution: usize,
) -> anyhow::Result<OracleSolution> {
    let domain = config.build_domain(reg, resolution)?;
    let rho0 = config.initial_density(domain.clone())?;
    match &config.oracle {
        OracleSpec::Fd { .. } => {
            let opts = config.fd_options().expect("fd oracle");
            let psi = config.resolve_psi()?;
            let sol = fd_solve(&rho0, &psi, &opts)?;
            Ok(OracleSolution {
                resolution,
                domain,
                final_density: sol.final_density().clone(),
                fd: Some(sol),
            })
        }
        OracleSpec::Ou => {
            let InitialSpec::Gaussian { mean, variance } = &config.initial else {
                bail!("the OU oracle needs a gaussian initial density");
            };
            let ok_psi = matches!(&config.psi, PsiSpec::Quadratic { center, k } if *k == 1.0 && center.iter().all(|c| *c == 0.0));
            if !ok_psi || config.jko.beta_inv != 1.0 {
                bail!("the OU oracle needs psi = |x|^2 / 2 and beta_inv = 1");
            }
            if config.domain.metric != "euclidean" {
                bail!("the OU oracle needs the euclidean metric");
            }
            let mut params = Vec::with_capacity(mean.len());
            for m in mean {
                params.push(ou_analytic(*m, *variance, config.jko.t_end)?);
            }
            let final_density = DiscreteDensity::from_fn(domain.clone(), |x| {
                x.iter()
                    .zip(&params)
                    .map(|(xi, (m, v))| (-(xi - m).powi(2) / (2.0 * v)).exp())
                    .product()
            })?;
            Ok(OracleSolution {
                resolution,
                domain,
                final_density,
                fd: None,
            })
        }
    }
}

fn moment_errors(a: &DiscreteDensity, b: &DiscreteDensity) -> (f64, f64) {
    let mean = a
        .mean()
        .iter()
        .zip(b.mean())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let cov = (a.covariance() - b.covariance()).abs().max();
    (mean, cov)
}

fn dictionary_integrals(rho: &DiscreteDensity, dict: &[TestFunction]) -> Vec<f64> {
    let masses = rho.masses();
    dict.iter()
        .map(|z| {
            rho.domain()
                .nodes()
                .iter()
                .zip(&masses)
                .map(|(x, m)| z.value(x) * m)
                .sum()
        })
        .collect()
}

fn metrics(
    config: &ExperimentConfig,
    traj: &FlowTrajectory,
    oracle: &OracleSolution,
) -> anyhow::Result<Metrics> {
    let last = traj.last();
    let l1_error = last.l1_distance(&oracle.final_density)?;
    let (mean_error, variance_error) = moment_errors(last, &oracle.final_density);
    let max_descent_violation = traj
        .records
        .windows(2)
        .map(|w| (w[1].energy - w[0].energy).max(0.0))
        .fold(0.0, f64::max);
    let max_el_residual = traj
        .records
        .iter()
        .filter_map(|r| r.el_residual)
        .fold(0.0, f64::max);
    let dict = neumann_dictionary(oracle.domain.bounds());
    let eta = TimeProfile::new(WEAK_SUPPORT * config.jko.t_end)?;
    let weak_residual =
        weak_residual_max(traj, &dict, &eta, &traj.config.psi, config.jko.beta_inv)?;
    let ours = dictionary_integrals(last, &dict);
    let theirs = dictionary_integrals(&oracle.final_density, &dict);
    let weak_surrogate = ours
        .iter()
        .zip(&theirs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Metrics {
        l1_error,
        mean_error,
        variance_error,
        max_descent_violation,
        max_el_residual,
        weak_residual,
        weak_surrogate,
        steps: traj.records.len() - 1,
    })
}

fn point_dir(config: &ExperimentConfig, tau: f64, resolution: usize) -> PathBuf {
    config
        .output_dir
        .join(format!("tau_{tau:e}_n_{resolution}"))
}

fn run_point(
    config: &ExperimentConfig,
    reg: &Registry,
    oracle: &anyhow::Result<OracleSolution>,
    tau: f64,
    resolution: usize,
) -> anyhow::Result<Metrics> {
    let oracle = oracle
        .as_ref()
        .map_err(|e| anyhow::anyhow!("oracle failed: {e:#}"))?;
    let jko = config.jko_config(reg, tau)?;
    let rho0 = config.initial_density(oracle.domain.clone())?;
    let traj = run_flow(&rho0, &jko)?;
    let dir = point_dir(config, tau, resolution);
    std::fs::create_dir_all(&dir)?;
    traj.write_diagnostics_csv(std::fs::File::create(dir.join("diagnostics.csv"))?)?;
    if config.jko.write_steps {
        traj.write_steps(&dir.join("steps"))?;
    }
    write_density_csv(traj.last(), std::fs::File::create(dir.join("final.csv"))?)?;
    if let Some(f) = &traj.failure {
        bail!("step {} failed: {}", f.step, f.message);
    }
    metrics(config, &traj, oracle)
}

/// Result of [`run_experiment`]: the deterministic report plus timings.
pub struct RunOutcome {
    pub report: RunReport,
    pub timings: Vec<Timing>,
}

/// Runs every `(tau, resolution)` point, writing artifacts under the
/// configured output directory. Failures are recorded per row.
pub fn run_experiment(config: &ExperimentConfig) -> anyhow::Result<RunOutcome> {
    config.check_shape()?;
    config.prepare_output()?;
    let reg = config.registry()?;
    let oracles: Vec<anyhow::Result<OracleSolution>> = config
        .sweep
        .resolutions
        .par_iter()
        .map(|&n| oracle_solution(config, &reg, n))
        .collect();
    let points: Vec<(usize, f64)> = (0..config.sweep.resolutions.len())
        .flat_map(|i| config.sweep.taus.iter().map(move |&t| (i, t)))
        .collect();
    let results: Vec<(ReportRow, Timing)> = points
        .par_iter()
        .map(|&(i, tau)| {
            let resolution = config.sweep.resolutions[i];
            let start = Instant::now();
            let res = run_point(config, &reg, &oracles[i], tau, resolution);
            let seconds = start.elapsed().as_secs_f64();
            let row = match res {
                Ok(m) => ReportRow {
                    tau,
                    resolution,
                    status: RowStatus::Ok,
                    reason: None,
                    metrics: Some(m),
                },
                Err(e) => {
                    log::error!("tau {tau:e}, resolution {resolution}: {e:#}");
                    ReportRow {
                        tau,
                        resolution,
                        status: RowStatus::Failed,
                        reason: Some(format!("{e:#}")),
                        metrics: None,
                    }
                }
            };
            (
                row,
                Timing {
                    tau,
                    resolution,
                    seconds,
                },
            )
        })
        .collect();
    let (rows, timings): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = RunReport {
        stamp: Stamp::new(config),
        rows,
    };
    report.write_json(&config.output_dir.join("report.json"))?;
    report.write_csv(&config.output_dir.join("report.csv"))?;
    write_timings(&timings, &config.output_dir.join("timings.csv"))?;
    Ok(RunOutcome { report, timings })
}

/// Solves only the oracle, writing `oracle_n_<resolution>/` with the final
/// density and, for the finite-difference oracle, every stored time.
pub fn run_oracle(config: &ExperimentConfig) -> anyhow::Result<Vec<PathBuf>> {
    config.check_shape()?;
    config.prepare_output()?;
    let reg = config.registry()?;
    let mut written = Vec::new();
    for &n in &config.sweep.resolutions {
        let sol = oracle_solution(config, &reg, n)
            .with_context(|| format!("oracle at resolution {n}"))?;
        let dir = config.output_dir.join(format!("oracle_n_{n}"));
        std::fs::create_dir_all(&dir)?;
        write_density_csv(
            &sol.final_density,
            std::fs::File::create(dir.join("final.csv"))?,
        )?;
        if let Some(fd) = &sol.fd {
            let mut w = csv::Writer::from_path(dir.join("times.csv"))?;
            w.write_record(["index", "t"])?;
            for (k, (t, rho)) in fd.times.iter().zip(&fd.densities).enumerate() {
                w.write_record([k.to_string(), format!("{t:.12e}")])?;
                write_density_csv(
                    rho,
                    std::fs::File::create(dir.join(format!("t_{k:05}.csv")))?,
                )?;
            }
            w.flush()?;
        }
        written.push(dir);
    }
    Ok(written)
}
