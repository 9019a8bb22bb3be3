//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value in {what} at path {path}, step {step}")]
    NonFinite {
        what: &'static str,
        path: usize,
        step: isize,
    },
    #[error("not converged: {0}")]
    NonConvergence(String),
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Config(_) | Error::NonFinite { .. } => 2,
            Error::NonConvergence(_) => 3,
            Error::ResourceCap(_) => 4,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::NonFinite { .. } => "non_finite",
            Error::NonConvergence(_) => "non_convergence",
            Error::ResourceCap(_) => "resource_cap",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
