//! Command-line harness: dataset ingestion, run configuration, experiment
//! orchestration and report files.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod selftest;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {message} at byte offset {offset}", file.display())]
    Idx {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{}: {source}", file.display())]
    File {
        file: PathBuf,
        source: std::io::Error,
    },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] tlalign::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn file_error(file: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let file = file.into();
    move |source| CliError::File { file, source }
}
