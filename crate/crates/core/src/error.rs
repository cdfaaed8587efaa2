use std::path::PathBuf;

use crate::backends::{BackendId, Primitive};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid data spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error("execution failed: {0}")]
    Execution(String),

    #[error("backend `{backend}` does not support {primitive}")]
    Unsupported {
        backend: BackendId,
        primitive: Primitive,
    },

    #[error("kernel registration failed: {0}")]
    Registration(String),

    #[error("invalid sweep configuration: {}", .0.join("; "))]
    PlanValidation(Vec<String>),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("unsupported result schema version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u32 },

    #[error("duplicate result points: {}", .0.join(", "))]
    DuplicatePoints(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
