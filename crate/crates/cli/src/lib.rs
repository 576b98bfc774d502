//! Config-driven runner: parses a TOML run description, solves the bridge,
//! recovers the density flow and writes CSV snapshots plus a JSON manifest.

pub mod config;
pub mod error;
pub mod run;

pub use config::{Mode, RunConfig};
pub use error::{exit, CliError, EXIT_CODES_HELP};
pub use run::{run, RunManifest, RunOutcome, MANIFEST_NAME};

/// Runs `f` on a dedicated pool with `threads` workers, or on the global
/// pool when `threads` is `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::Validation("--threads must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}
