use thiserror::Error;

/// Errors raised by the laboratory. Each variant maps to one failure class.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{map} returned a non-finite value at {input}")]
    Evaluation { map: &'static str, input: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("Picard iteration did not converge at t = {time} after {iterations} iterations (residual {residual:e})")]
    PicardNonConvergence {
        time: f64,
        iterations: usize,
        residual: f64,
    },

    #[error(
        "shooting found no root after {iterations} iterations (best residual {best_residual:e})"
    )]
    Shooting {
        iterations: usize,
        best_residual: f64,
    },

    #[error("integration diverged at t = {time}: {detail}")]
    Divergence { time: f64, detail: String },

    #[error("fixed-point sweeps stopped contracting after {sweeps} sweeps (residual {residual:e}); the horizon is likely outside the small-time regime")]
    Contraction { sweeps: usize, residual: f64 },

    #[error("path {path} left the field region at step {step} (state {state})")]
    Excursion {
        path: usize,
        step: usize,
        state: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{count} preimage branches at t = {time}; switch to grid-search mode")]
    BranchExplosion { count: usize, time: f64 },

    #[error("no hits at any epsilon: {0}")]
    NoHits(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short name of the failure class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Evaluation { .. } => "evaluation",
            Error::Config(_) => "configuration",
            Error::PicardNonConvergence { .. } => "picard",
            Error::Shooting { .. } => "shooting",
            Error::Divergence { .. } => "divergence",
            Error::Contraction { .. } => "contraction",
            Error::Excursion { .. } => "excursion",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Domain(_) => "domain",
            Error::BranchExplosion { .. } => "branch-explosion",
            Error::NoHits(_) => "no-hits",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
