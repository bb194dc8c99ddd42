use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid option: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] dpfed_core::Error),
    #[error(transparent)]
    He(#[from] dpfed_he::HeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("chart: {0}")]
    Chart(String),
    #[error("no metrics CSVs in {0}")]
    NoMetrics(PathBuf),
    #[error("{failed} of {total} runs failed (partial metrics written); first: {first}")]
    RunsFailed { failed: usize, total: usize, first: String },
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> BenchError {
    let path = path.into();
    move |source| BenchError::Io { path, source }
}

pub(crate) fn csv_err(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> BenchError {
    let path = path.into();
    move |source| BenchError::Csv { path, source }
}
