use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Overflow, NaN, divergence.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// An iterative solver stopped before meeting its tolerance.
    #[error("{solver} did not converge after {iters} iterations (residual {residual:.3e}, tolerance {tol:.3e})")]
    NotConverged { solver: &'static str, iters: usize, residual: f64, tol: f64 },

    /// A second-order quantity was requested for a nonsmooth activation.
    #[error("{0} requires a twice-differentiable model; ReLU is only allowed for training and the gradient-penalty attack")]
    Nonsmooth(&'static str),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A replayed run produced artifacts that differ from its manifest.
    #[error("replay mismatch: {0}")]
    Replay(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) | Error::NotConverged { .. } | Error::Nonsmooth(_) | Error::Replay(_) => 3,
            Error::Io { .. } | Error::Json(_) | Error::Format(_) => 4,
            Error::Shape(_) => 2,
        }
    }
}
