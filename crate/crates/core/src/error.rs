use thiserror::Error;

/// Errors raised by the simulation back-ends and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error(
        "target imbalance {target} unreachable; achievable range is [{min:.6}, {max:.6}]"
    )]
    UnreachableTarget { target: f64, min: f64, max: f64 },

    #[error("phase-space point outside the physical domain: {0}")]
    PhaseSpaceDomain(String),

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },

    #[error(
        "prefactor branch ambiguous: phase jumped by {jump:.3} rad between output samples; use a finer output grid"
    )]
    BranchAmbiguity { jump: f64 },

    #[error("semiclassical norm collapsed to {norm:e} at t = {t}")]
    NormCollapse { t: f64, norm: f64 },

    #[error("time window [{t0}, {t1}] lies outside the grid [{grid_start}, {grid_end}]")]
    WindowOutsideGrid {
        t0: f64,
        t1: f64,
        grid_start: f64,
        grid_end: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
