use std::path::PathBuf;

/// Pipeline-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{stage} diverged at iteration {iteration}: {message}")]
    Divergence {
        stage: String,
        iteration: u64,
        message: String,
    },
    #[error("missing prerequisite: {what} not found at {path}; run `{subcommand}` first")]
    MissingPrerequisite {
        what: String,
        path: PathBuf,
        subcommand: String,
    },
    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },
    #[error(transparent)]
    Core(#[from] gvr_core::CoreError),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        PipelineError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        PipelineError::Contract(message.into())
    }

    pub fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        PipelineError::Config {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
