//! Declarative experiments for JKO flows: TOML configs, `(tau, resolution)`
//! sweeps against a reference solution, and CSV/JSON reports.

pub mod config;
pub mod experiment;
pub mod validate;

pub use config::{ExperimentConfig, SCHEMA_VERSION};
pub use experiment::{run_experiment, run_oracle, RowStatus, RunOutcome, RunReport};
pub use validate::{validate_config, Diagnostic, Level};
