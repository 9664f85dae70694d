//! Dataset curation: leakage-safe splits, background box sampling, crops
//! and taxonomy remapping.
//!
//! Everything here is a pure function of its inputs and seed. Random streams
//! are derived per item from `(seed, id)`.

mod background;
mod crop;
mod remap;
mod split;

use thiserror::Error;

pub use background::{sample_background_boxes, BackgroundSample, DEFAULT_BACKGROUND_SIZE_RANGE, DEFAULT_RETRY_BUDGET};
pub use crop::{crop_rect, crop_to_box};
pub use remap::{image_label, remap_taxonomy, to_base_vocabulary};
pub use split::{burst_split, camera_holdout_split, Split, SplitAssignment, SplitStrategy};

use crate::geometry::GeometryError;
use crate::taxonomy::TaxonomyError;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("no bursts to split")]
    NoBursts,
    #[error("invalid split fractions {0:?}: need non-negative values summing to 1")]
    BadFractions(Vec<f64>),
    #[error("unknown camera {camera:?}; known cameras: {known:?}")]
    UnknownCamera { camera: String, known: Vec<String> },
    #[error("invalid background size range ({0}, {1}): need 0 < min <= max <= 1")]
    BadSizeRange(f64, f64),
    #[error("negative crop padding {0}")]
    BadPadding(f64),
    #[error("split file line {line}: {message}")]
    SplitFormat { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}
