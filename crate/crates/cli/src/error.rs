use std::path::PathBuf;

use smdm::config::ConfigError;
use smdm::diffusion::DiffusionError;
use smdm::eval::EvalError;
use smdm::io::IoError;
use smdm::keyframes::KeyframeError;
use smdm::model::ModelError;
use smdm::motion::MotionError;
use smdm::tensor::TensorError;

/// Every failure the driver reports, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    File(#[from] IoError),
    #[error("{0}")]
    Csv(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Io { .. } | CliError::File(_) | CliError::Csv(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFinite(_) => CliError::Numeric(e.to_string()),
            DiffusionError::Model(m) => m.into(),
            DiffusionError::Motion(m) => m.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<MotionError> for CliError {
    fn from(e: MotionError) -> Self {
        match e {
            MotionError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<KeyframeError> for CliError {
    fn from(e: KeyframeError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
