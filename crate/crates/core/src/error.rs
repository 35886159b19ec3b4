use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid architecture at layer {index}: {detail}")]
    Architecture { index: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("degenerate clustering at iteration {iteration}: only {labels} distinct label(s) left")]
    DegenerateClusters { iteration: usize, labels: usize },

    #[error("gradient check failed at coordinate {index}: analytic {analytic}, numeric {numeric}")]
    GradCheck {
        index: usize,
        analytic: f64,
        numeric: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
