//! Run persistence and the review API.
//!
//! A run is an immutable snapshot of pipeline results plus an append-only
//! log of reviewer decisions. Everything the review workflow shows (queue,
//! statistics, what-if relabelling, exports) is derived from those two files.

mod http;
mod review;
mod store;

use thiserror::Error;

pub use http::{router, serve, AppState};
pub use review::{
    build_queue, export_ndjson, export_voc, queue_page, replay_decisions, run_stats, whatif, DecisionAck,
    ExportHeader, MovedImage, QueueEntry, QueueFilter, QueuePage, ReviewDecision, RunStats, VocExport, VocFile,
    WhatifOverrides, WhatifSummary,
};
pub use store::{run_id_for, CreateRun, DecisionRecord, RunSnapshot, RunState, RunStore, RunSummary};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("image {image_id:?} is not part of run {run_id}")]
    UnknownImage { run_id: String, image_id: String },
    #[error("label {label:?} is not a class of taxonomy {taxonomy} (expected one of {classes:?})")]
    InvalidLabel { label: String, taxonomy: String, classes: Vec<String> },
    #[error("unsupported override: {0}")]
    UnsupportedOverride(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("pipeline: {0}")]
    Pipeline(String),
    #[error("storage: {0}")]
    Storage(String),
}

impl ServiceError {
    /// Stable machine-readable kind for API responses.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::UnknownRun(_) => "unknown_run",
            ServiceError::UnknownImage { .. } => "unknown_image",
            ServiceError::InvalidLabel { .. } => "invalid_label",
            ServiceError::UnsupportedOverride(_) => "unsupported_override",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Pipeline(_) => "pipeline_error",
            ServiceError::Storage(_) => "storage_error",
        }
    }
}

fn storage(path: &std::path::Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Storage(format!("{}: {e}", path.display()))
}
