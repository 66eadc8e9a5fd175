use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The manifest (or another structured-text input) did not parse.
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    /// A record parsed but violates a dataset invariant.
    #[error("validation error in record `{record}`: {message}")]
    Validation { record: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {message} (offending groups: {groups:?})")]
    Checkpoint { message: String, groups: Vec<String> },

    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// All labels in a batch are absent, so the loss is undefined.
    #[error("loss undefined: no labeled entries")]
    UndefinedLoss,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),

    /// An error raised inside a named pipeline stage, e.g. `fold 3`.
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Short machine-readable name of the innermost error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::Validation { .. } => "validation",
            Error::Config(_) => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Numerical { .. } => "numerical",
            Error::UndefinedLoss => "undefined_loss",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
            Error::SafeTensors(_) => "safetensors",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Stage names from outermost to innermost.
    pub fn stages(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut e = self;
        while let Error::Stage { stage, source } = e {
            out.push(stage.as_str());
            e = source;
        }
        out
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            record: record.into(),
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>, groups: Vec<String>) -> Self {
        Error::Checkpoint {
            message: message.into(),
            groups,
        }
    }
}
