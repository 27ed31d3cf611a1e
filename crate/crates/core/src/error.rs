use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller input: wrong lengths, out-of-range parameters, empty sets.
    #[error("invalid input: {0}")]
    Input(String),

    /// Inconsistent configuration (ratios, hyperparameters, unknown names).
    #[error("configuration error: {0}")]
    Config(String),

    /// A request the caller cannot make, such as an unknown output format.
    #[error("usage error: {0}")]
    Usage(String),

    /// A manifest row or its image could not be ingested.
    #[error("ingestion error for record `{record}`: {reason}")]
    Ingestion { record: String, reason: String },

    /// Shape inference or parameter accounting failed for a model spec.
    #[error("model spec error: {0}")]
    Spec(String),

    #[error("pretrained weights unavailable for backbone `{0}`")]
    PretrainedUnavailable(String),

    #[error("training error: {0}")]
    Training(String),

    /// Non-finite loss during training.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// Wraps another error with the name of the model or stage that raised it.
    #[error("{name}: {source}")]
    Context {
        name: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn context(self, name: impl Into<String>) -> Self {
        Error::Context {
            name: name.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by the user's configuration rather than by
    /// the data or the run itself.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::PretrainedUnavailable(_) => true,
            Error::Context { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
