use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every fatal condition in the toolkit, qualified by the module that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("event_model: {path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("event_model: invalid record: {0}")]
    InvalidRecord(String),
    #[error("event_model: no records to encode")]
    NoRecords,

    #[error("cohort_builder: {0}")]
    Cohort(String),

    #[error("feature_scoring: {0}")]
    Scoring(String),

    #[error("classifier: feature dictionary mismatch (model {model}, rows {rows})")]
    Misaligned { model: String, rows: String },
    #[error("classifier: {0}")]
    Classifier(String),

    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("evaluation: repetition {repetition}: {source}")]
    Repetition {
        repetition: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ablation_engine: {0}")]
    Ablation(String),

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("cli_reporting: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
