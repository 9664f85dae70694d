//! Camera-trap image triage.
//!
//! The crate is organised along the processing chain:
//!
//! * [`catalog`] ingests image manifests and VOC box annotations and groups
//!   images into activation bursts.
//! * [`curation`] builds leakage-safe splits, samples background boxes,
//!   crops regions and remaps class taxonomies.
//! * [`stages`] holds the per-image inference stages (region proposal, mask
//!   compositing, classification) behind pluggable backends.
//! * [`ensemble`] votes over model outputs and orchestrates the pipeline.
//! * [`evaluation`] computes skew-aware metrics and runs the experiment grid.

pub mod catalog;
pub mod curation;
pub mod ensemble;
pub mod evaluation;
pub mod fixture;
pub mod geometry;
pub mod pixels;
pub mod seed;
pub mod stages;
pub mod taxonomy;

pub use catalog::{Annotation, Burst, BurstPolicy, CameraTrapImage, Catalog, ImageSource, LabelSet};
pub use ensemble::{PipelineConfig, RunOutput, Vote, VoteMethod, VoteResult};
pub use evaluation::{ConfusionMatrix, EvaluationReport};
pub use geometry::BoundingBox;
pub use stages::{ClassScores, Mask, RegionProposal};
pub use taxonomy::{ClassTaxonomy, TaxonomyRegistry};
