use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion error at row {row}: {message}")]
    Ingest { row: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shard file {path}: {message}")]
    ShardFormat { path: PathBuf, message: String },

    #[error("reduction failed on shard {shard}: {message}")]
    Reduction { shard: usize, message: String },

    #[error("solver diverged at iteration {iteration} (residual {residual:.3e}); try a smaller alpha")]
    Divergence { iteration: usize, residual: f64 },

    #[error("model fit did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NoConvergence { iterations: usize, gradient_norm: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("bootstrap failed: {failed} of {total} replicates did not converge")]
    Bootstrap { failed: usize, total: usize },

    #[error("{0}")]
    Simulation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Ingest { .. } => "ingest",
            Error::Validation(_) => "validation",
            Error::ShardFormat { .. } => "shard_format",
            Error::Reduction { .. } => "reduction",
            Error::Divergence { .. } => "divergence",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Numerical(_) => "numerical",
            Error::Bootstrap { .. } => "bootstrap",
            Error::Simulation(_) => "simulation",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
