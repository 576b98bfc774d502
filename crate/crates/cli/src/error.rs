use std::path::PathBuf;

use lambridge_core::Error as CoreError;
use thiserror::Error;

/// Process exit codes. Listed in `lambridge --help`.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const NO_CONVERGENCE: i32 = 2;
    pub const CONFIG_PARSE: i32 = 3;
    pub const VALIDATION: i32 = 4;
    pub const SINGULARITY: i32 = 5;
    pub const DOMAIN_TOO_NARROW: i32 = 6;
    pub const NON_FINITE_KERNEL: i32 = 7;
    pub const DIVISION_BLOWUP: i32 = 8;
    pub const MASS_LEAKAGE: i32 = 9;
    pub const NEWTON_DIVERGENCE: i32 = 10;
    pub const MEAN_PATH_CHECK: i32 = 11;
    pub const NUMERICAL: i32 = 12;
}

pub const EXIT_CODES_HELP: &str = "\
Exit codes:
   0  success
   1  I/O or other failure
   2  recursion hit max_iters before tol_hilbert (outputs are still written)
   3  config file could not be read or parsed
   4  config failed validation
   5  potential singularity (grid node or trajectory inside r_min)
   6  grid box too narrow for the diffusion length
   7  non-finite kernel (epsilon too small for the potential scale)
   8  division blowup in the factor recursion
   9  endpoint density leaks out of the grid box
  10  Lambert shooting diverged
  11  bridge mean path deviates from the Lambert arc beyond the configured bound
  12  other numerical failure";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid config: {0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("cannot build thread pool: {0}")]
    ThreadPool(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Parse { .. } => exit::CONFIG_PARSE,
            Self::Validation(_) => exit::VALIDATION,
            Self::Core(e) => core_exit_code(e),
            Self::Io { .. } | Self::Json(_) | Self::ThreadPool(_) => exit::FAILURE,
        }
    }
}

pub fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Singularity { .. } | CoreError::SingularityCrossing { .. } => exit::SINGULARITY,
        CoreError::DomainTooNarrow { .. } => exit::DOMAIN_TOO_NARROW,
        CoreError::NonFiniteKernel(_) => exit::NON_FINITE_KERNEL,
        CoreError::DivisionBlowup { .. } => exit::DIVISION_BLOWUP,
        CoreError::MassLeakage { .. } => exit::MASS_LEAKAGE,
        CoreError::NewtonDivergence(_) => exit::NEWTON_DIVERGENCE,
        CoreError::NoConvergence { .. } => exit::NO_CONVERGENCE,
        CoreError::InvalidSpec(_)
        | CoreError::DimensionMismatch { .. }
        | CoreError::UnalignedSnapshot { .. }
        | CoreError::ScheduleTooCoarse(_)
        | CoreError::FieldFormat(_) => exit::VALIDATION,
        CoreError::NonPositiveField { .. } | CoreError::GridMismatch => exit::NUMERICAL,
        CoreError::Io(_) | CoreError::Csv(_) => exit::FAILURE,
    }
}
