use std::path::PathBuf;

/// Errors raised across the library.
///
/// Variants map onto the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("logistic fit did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    Convergence {
        iterations: usize,
        gradient_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("complete separation suspected: coefficient norm {norm:.3e} exceeds bound")]
    Separation { norm: f64, last_iterate: Vec<f64> },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported format version {found}; supported versions: {supported:?}")]
    Version { found: u32, supported: Vec<u32> },

    #[error("degenerate estimand: {0}")]
    DegenerateEstimand(String),

    #[error("replicate {replicate} failed at stage `{stage}`: {cause}")]
    Replicate {
        replicate: usize,
        stage: String,
        cause: Box<Error>,
    },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 fit failure, 4 integrity/version, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_)
            | Error::Validation(_)
            | Error::Positivity(_)
            | Error::Config(_)
            | Error::Schema(_)
            | Error::DegenerateEstimand(_) => 2,
            Error::Fit(_) | Error::Convergence { .. } | Error::Separation { .. } | Error::Consistency(_) => 3,
            Error::Integrity(_) | Error::Version { .. } => 4,
            Error::Replicate { cause, .. } => cause.exit_code(),
            Error::Io { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
