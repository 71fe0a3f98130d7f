use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("physics domain violation: transfer parameters {t:?} ({reason})")]
    PhysicsDomain { t: Vec<f64>, reason: String },

    #[error("non-finite gradient at parameter group {group}, index {index}")]
    NonFiniteGradient { group: usize, index: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: mse={mse}, elbo={elbo}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        mse: f64,
        elbo: f64,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("all {0} Monte Carlo samples violated the physics domain")]
    AllSamplesExcluded(usize),

    #[error("insufficient samples: requested {requested}, available {available}")]
    InsufficientSamples { requested: usize, available: usize },

    #[error("zero variance in column {0}")]
    ZeroVariance(usize),

    #[error("model is already Bayesian")]
    AlreadyBayesian,

    #[error("model has no variational layer")]
    NotBayesian,

    #[error("bad model file: {0}")]
    Format(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidConfig(_) => "invalid_config",
            Error::PhysicsDomain { .. } => "physics_domain",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Invariant(_) => "invariant",
            Error::Empty(_) => "empty",
            Error::AllSamplesExcluded(_) => "all_samples_excluded",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::ZeroVariance(_) => "zero_variance",
            Error::AlreadyBayesian => "already_bayesian",
            Error::NotBayesian => "not_bayesian",
            Error::Format(_) => "format",
            Error::Csv(_) => "csv",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
        }
    }

    /// The file involved, for I/O errors.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. } => Some(path),
            _ => None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
