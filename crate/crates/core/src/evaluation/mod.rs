//! Skew-aware metrics and the experiment grid.

mod experiments;
mod metrics;
mod report;

use thiserror::Error;

pub use experiments::{
    ground_truth_label, run_experiment, EvalSet, ExperimentContext, ExperimentId, ExperimentOverrides, ExperimentRun,
    ExperimentSpec, ExperimentSuite, VALID_EXPERIMENT_IDS,
};
pub use metrics::{
    estimate_review_savings, evaluate, ClassMetrics, ConfusionMatrix, EvaluationReport, Ratio,
    DEFAULT_REVIEW_RATE_PER_MINUTE,
};
pub use report::{experiment_record, render_report_text, write_reports, ExperimentRecord};

use crate::catalog::CatalogError;
use crate::curation::CurationError;
use crate::ensemble::EnsembleError;
use crate::taxonomy::TaxonomyError;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("label {label:?} is not a class of taxonomy {taxonomy}")]
    UnknownLabel { label: String, taxonomy: String },
    #[error("image {0:?} appears more than once")]
    Duplicate(String),
    #[error(
        "predictions and ground truth cover different images: {} without ground truth {:?}, {} without prediction {:?}",
        .without_truth.len(), .without_truth.iter().take(5).collect::<Vec<_>>(),
        .without_prediction.len(), .without_prediction.iter().take(5).collect::<Vec<_>>()
    )]
    Orphans { without_truth: Vec<String>, without_prediction: Vec<String> },
    #[error("review rate must be a positive number of images per minute, got {0}")]
    BadRate(f64),
    #[error("unknown experiment {id:?}; valid ids: {valid}")]
    UnknownExperiment { id: String, valid: String },
    #[error("unknown camera {camera:?}; captivity cameras: {known:?}")]
    UnknownCamera { camera: String, known: Vec<String> },
    #[error("{} evaluation images have no annotation, e.g. {:?}", .0.len(), .0.iter().take(5).collect::<Vec<_>>())]
    MissingAnnotations(Vec<String>),
    #[error("experiment suite: {0}")]
    Suite(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}
