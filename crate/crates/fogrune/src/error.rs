//! Crate-wide error type.

use thiserror::Error;

/// Validation finding produced by `function::validate` and scenario checks.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum FogError {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("invalid geohash: {0}")]
    InvalidGeohash(String),
    #[error("geohash precision {0} out of range 1..=12")]
    InvalidPrecision(usize),
    #[error("update targets entity {update_id} but store holds {entity_id}")]
    IdMismatch { update_id: String, entity_id: String },
    #[error("entity type conflict for {id}: update says {update_type}, stored is {stored_type}")]
    TypeConflict {
        id: String,
        update_type: String,
        stored_type: String,
    },
    #[error("unknown subscription {0}")]
    UnknownSubscription(String),
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown worker {0}")]
    UnknownWorker(String),
    #[error("unknown operator {0}")]
    UnknownOperator(String),
    #[error("duplicate function {0}")]
    DuplicateFunction(String),
    #[error("invalid function {name}: {}", crate::error::join_diagnostics(.diagnostics))]
    InvalidFunction {
        name: String,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("no worker available for placement")]
    NoWorkerAvailable,
    #[error("cannot derive group key: {0}")]
    Unroutable(String),
    #[error("capacity exceeded on worker {0}")]
    CapacityExceeded(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
