use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("input error: {0}")]
    Input(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("state error: {0}")]
    State(String),

    #[error("tokenization error: unknown token {0:?}")]
    Tokenization(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at stage {stage} step {step}: loss = {loss}")]
    Divergence { stage: u8, step: usize, loss: f64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Routing(_) => "routing",
            Error::State(_) => "state",
            Error::Tokenization(_) => "tokenization",
            Error::Generation(_) => "generation",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence { .. } => "divergence",
            Error::Evaluation(_) => "evaluation",
            Error::Export(_) => "export",
            Error::UndefinedMetric(_) => "metric",
            Error::MissingFile(_) => "missing-file",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
