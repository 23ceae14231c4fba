use std::path::PathBuf;

use thiserror::Error;
use varbranch::envs::EnvError;
use varbranch::model::ModelError;
use varbranch::trainer::TrainError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_CENSORED: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", fmt_config(.path, .line, .message))]
    Config { path: Option<PathBuf>, line: Option<usize>, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("artifact check failed: {0}")]
    Artifact(String),
}

fn fmt_config(path: &Option<PathBuf>, line: &Option<usize>, message: &str) -> String {
    let mut at = String::from("config error");
    if let Some(p) = path {
        at.push_str(&format!(" in {}", p.display()));
    }
    if let Some(l) = line {
        at.push_str(&format!(" at line {l}"));
    }
    format!("{at}: {message}")
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config { path: None, line: None, message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Data { path: path.into(), message: message.into() }
    }

    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. }
            | CliError::Train(TrainError::Config(_) | TrainError::Env(EnvError::Config(_)) | TrainError::Model(ModelError::Config(_))) => {
                EXIT_CONFIG
            }
            _ => EXIT_RUNTIME,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
