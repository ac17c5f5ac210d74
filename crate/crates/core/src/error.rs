use thiserror::Error;

use crate::connector::ConnectorError;
use crate::focusfast::FocusFastError;
use crate::ingest::IngestError;
use crate::numerics::NumericsError;
use crate::router::RouterError;
use crate::segmenter::SegmenterError;
use crate::supervision::SupervisionError;

/// Crate-level error used by the trainer, the harness and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad data: {0}")]
    Data(String),
    #[error("training diverged at step {step}: non-finite {term} (max |grad| {max_grad:e})")]
    Diverged {
        step: usize,
        term: &'static str,
        max_grad: f64,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    FocusFast(#[from] FocusFastError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, mapped to process exit codes by the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

fn numerics_kind(e: &NumericsError) -> ErrorKind {
    match e {
        NumericsError::NonFinite { .. } => ErrorKind::Numeric,
        NumericsError::Shape(_) => ErrorKind::Data,
        NumericsError::Usage(_) => ErrorKind::Usage,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Segmenter(_) | Error::Supervision(SupervisionError::Threshold(_)) => {
                ErrorKind::Usage
            }
            Error::Diverged { .. } => ErrorKind::Numeric,
            Error::Numerics(e)
            | Error::Connector(ConnectorError::Numerics(e))
            | Error::Router(RouterError::Numerics(e))
            | Error::FocusFast(FocusFastError::Numerics(e))
            | Error::Ingest(IngestError::Numerics(e))
            | Error::Supervision(SupervisionError::Numerics(e)) => numerics_kind(e),
            Error::Connector(ConnectorError::Config(_))
            | Error::Router(RouterError::Config(_))
            | Error::FocusFast(FocusFastError::Config(_)) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}
