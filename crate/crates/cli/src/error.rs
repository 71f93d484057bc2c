use std::path::PathBuf;

use mfkd::config::ConfigError;
use mfkd::experiment::ExperimentError;
use mfkd::fusion::FusionError;
use mfkd::synth::SynthError;
use mfkd_tensor::wire::FormatError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{what}\n  hint: run `{hint}` first")]
    Missing { what: String, hint: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0} gradient check(s) failed")]
    GradcheckFailed(usize),
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Experiment(e.into())
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        CliError::Experiment(e.into())
    }
}

impl From<mfkd::backbone::ModelError> for CliError {
    fn from(e: mfkd::backbone::ModelError) -> Self {
        CliError::Experiment(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

pub fn format(path: impl Into<PathBuf>) -> impl FnOnce(FormatError) -> CliError {
    let path = path.into();
    move |source| CliError::Format { path, source }
}
