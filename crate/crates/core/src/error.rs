use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("position |r| = {radius} is inside the singularity guard radius {r_min}")]
    Singularity { radius: f64, r_min: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("{leaked:.3e} of the density mass lies outside the grid box (limit 1e-2)")]
    MassLeakage { leaked: f64 },

    #[error("field has a non-positive or non-finite entry at node {node} ({value})")]
    NonPositiveField { node: usize, value: f64 },

    #[error("fields or operators live on different grids")]
    GridMismatch,

    #[error(
        "diffusion length {diffusion_length:.4} exceeds a quarter of the box width {width:.4} on axis {axis}"
    )]
    DomainTooNarrow {
        axis: usize,
        diffusion_length: f64,
        width: f64,
    },

    #[error("non-finite kernel: {0}")]
    NonFiniteKernel(String),

    #[error("snapshot time {time} is outside [{t_start}, {t_end}] or not on a substep boundary")]
    UnalignedSnapshot { time: f64, t_start: f64, t_end: f64 },

    #[error("recursion did not converge in {iterations} iterations (last Hilbert distance {last_distance:.3e})")]
    NoConvergence { iterations: usize, last_distance: f64 },

    #[error("denominator collapsed to {value:.3e} (max {max:.3e}) at node {node}: inconsistent support or over-killed kernel")]
    DivisionBlowup { node: usize, value: f64, max: f64 },

    #[error("need at least 3 snapshots on a uniform schedule, got {0}")]
    ScheduleTooCoarse(usize),

    #[error("trajectory crossed the singularity guard at t = {time} (|r| = {radius})")]
    SingularityCrossing { time: f64, radius: f64 },

    #[error("shooting iteration diverged: {0}")]
    NewtonDivergence(String),

    #[error("malformed field file: {0}")]
    FieldFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
