//! Voting over model outputs and the per-image pipeline that produces them.

mod aggregate;
mod config;
mod pipeline;
mod vote;

use thiserror::Error;

pub use aggregate::{aggregate_image_label, AggregateOptions, AggregationPolicy};
pub use config::{
    PipelineConfig, SlotDescriptor, DEFAULT_MAX_FAILURE_FRACTION, DEFAULT_MIN_CONFIDENCE, MAX_MODELS_PER_SCALE,
};
pub use pipeline::{
    revote_outcome, run_pipeline, BackendVersion, ImageFailure, ImageOutcome, Pipeline, RunOutput, RunRecord, RunStatus,
};
pub use vote::{hierarchical_vote, plurality_vote, vote, TieBreak, Vote, VoteMethod, VoteResult, MEAN_SCORE_EPSILON};

use crate::stages::StageError;
use crate::taxonomy::TaxonomyError;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("cannot vote on an empty list of votes")]
    EmptyVotes,
    #[error("vote scored under taxonomy {got:?}, expected {expected:?}")]
    TaxonomyMismatch { expected: String, got: String },
    #[error("label {label:?} is not a class of taxonomy {taxonomy}")]
    UnknownLabel { label: String, taxonomy: String },
    #[error("result for image {got:?} passed while aggregating {expected:?}")]
    MixedImages { expected: String, got: String },
    #[error("pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}
