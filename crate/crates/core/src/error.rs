use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },
    #[error("threshold policy error: {0}")]
    Policy(String),
    #[error("insufficient pool {pool}: have {have}, need {need}; nearest misses: {nearest:?}")]
    InsufficientPool {
        pool: &'static str,
        have: usize,
        need: usize,
        nearest: Vec<(String, f64)>,
    },
    #[error("insufficient surrogates in total: |M1| + |M2| = {have}, need {need}")]
    InsufficientTotal { have: usize, need: usize },
    #[error("rank-deficient regression: {0}")]
    RankDeficient(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("bootstrap unstable: {failed} of {trials} resamples failed")]
    Instability { failed: usize, trials: usize },
    #[error("incomplete coverage, missing (surrogate, attack) cells: {0:?}")]
    IncompleteCoverage(Vec<(String, String)>),
    #[error("missing dependency: expected {}", .0.display())]
    MissingDependency(PathBuf),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("stage '{stage}' failed: {source}\nhint: {hint}")]
    Stage {
        stage: &'static str,
        hint: String,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingDependency(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
