//! Driver for the space-time Galerkin solver: configuration, experiment
//! pipelines and output writers.

pub mod config;
pub mod output;
pub mod pipelines;

use thiserror::Error;

pub use tdbem_core::block_system::{BlockError, BlockHessenbergMatrix, DistributionPlan};
pub use tdbem_core::mesh::{MeshError, SurfaceMesh, Vec3};
pub use tdbem_core::potential_eval::{FieldError, FieldGrid, FieldRule, FieldTable};
pub use tdbem_core::reference::{IncidentWave, ReferenceError, TimeSignal};
pub use tdbem_core::solvers::{Method, SolveResult, SolverConfig, SolverError};
pub use tdbem_core::temporal_basis::{GridError, TimeGrid};

pub use config::{Command, ConfigError, RunConfig};

/// Environment variable overriding the worker count of the config file.
pub const WORKERS_ENV: &str = "TDBEM_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("solver did not reach the requested tolerance")]
    NotConverged,
}

impl CliError {
    /// 2 for configuration errors, 3 for non-convergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::NotConverged => 3,
            _ => 1,
        }
    }
}

/// Worker count: command line first, then the environment, then the config.
pub fn resolve_workers(flag: Option<usize>, env: Option<&str>, config: usize) -> Result<usize, ConfigError> {
    let w = match (flag, env) {
        (Some(w), _) => w,
        (None, Some(v)) => v.trim().parse().map_err(|_| ConfigError::Key {
            key: WORKERS_ENV.into(),
            msg: format!("cannot parse `{v}`"),
        })?,
        (None, None) => config,
    };
    if w == 0 {
        return Err(ConfigError::Key {
            key: "workers".into(),
            msg: "must be at least 1".into(),
        });
    }
    Ok(w)
}

/// Runs `f` on a rayon pool with `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool")
        .install(f)
}

/// Runs the pipeline of `cfg.command`; non-converged solves are reported
/// after all outputs are written.
pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let converged = with_workers(cfg.workers, || -> Result<bool, CliError> {
        Ok(match cfg.command {
            Command::Convergence => pipelines::run_convergence(cfg)?.all_converged(),
            Command::Bench => pipelines::run_solver_bench(cfg)?.all_converged(),
            Command::Solve => pipelines::run_scattering(cfg)?.result.converged,
        })
    })?;
    if converged {
        Ok(())
    } else {
        Err(CliError::NotConverged)
    }
}
