//! Image catalog: manifest ingestion, VOC box annotations and burst grouping.
//!
//! A [`Catalog`] is built once by a single writer and is immutable afterwards,
//! so it can be shared freely between pipeline workers.

mod burst;
mod infrared;
mod manifest;
mod voc;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use burst::{group_bursts, Burst, BurstPolicy};
pub use infrared::{looks_infrared, INFRARED_CHANNEL_TOLERANCE, INFRARED_PIXEL_FRACTION};
pub use manifest::{ingest_manifest, IngestOptions};
pub use voc::{
    parse_box_annotations, parse_box_annotations_str, parse_voc_boxes, write_voc_xml, Annotation, LabeledBox,
    ParseWarning, ParsedAnnotation,
};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate image_id {0:?}")]
    DuplicateId(String),
    #[error("image {image_id}: referenced file {path} does not exist")]
    MissingFile { image_id: String, path: PathBuf },
    #[error("image {image_id}: {message}")]
    Pixels { image_id: String, message: String },
    #[error("image {0} has no capture timestamp; burst grouping needs one")]
    MissingTimestamp(String),
    #[error("annotation {path}: {message}")]
    Annotation { path: String, message: String },
    #[error("annotation {path}: degenerate box for {label:?} after clamping")]
    DegenerateBox { path: String, label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Captivity,
    Wild,
    External,
}

impl ImageSource {
    pub fn requires_timestamp(self) -> bool {
        !matches!(self, ImageSource::External)
    }
}

/// Which label vocabulary an annotation file was written against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSet {
    Set1,
    Set2,
    Wild,
}

impl LabelSet {
    /// Labels permitted in annotation files of this set.
    pub fn allowed_labels(self) -> &'static [&'static str] {
        match self {
            LabelSet::Set1 | LabelSet::Set2 => &[
                "WildcatDay",
                "WildcatNight",
                "AnimalOther",
                "AnimalUnknown",
                "Background",
            ],
            LabelSet::Wild => &["Wildcat", "AnimalOther", "AnimalUnknown", "Background"],
        }
    }

    pub fn allows(self, label: &str) -> bool {
        self.allowed_labels().contains(&label)
    }
}

impl std::fmt::Display for LabelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelSet::Set1 => "set1",
            LabelSet::Set2 => "set2",
            LabelSet::Wild => "wild",
        })
    }
}

impl std::str::FromStr for LabelSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "set1" => Ok(LabelSet::Set1),
            "set2" => Ok(LabelSet::Set2),
            "wild" => Ok(LabelSet::Wild),
            other => Err(format!("unknown label set {other:?} (expected set1, set2 or wild)")),
        }
    }
}

/// One catalogued camera-trap frame. Serializes with the manifest field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraTrapImage {
    pub image_id: String,
    pub camera_id: String,
    #[serde(with = "timestamp", default, skip_serializing_if = "Option::is_none")]
    pub captured_at: Option<DateTime<Utc>>,
    #[serde(rename = "file")]
    pub file_ref: String,
    #[serde(rename = "width")]
    pub width_px: u32,
    #[serde(rename = "height")]
    pub height_px: u32,
    pub source: ImageSource,
    #[serde(rename = "infrared", default)]
    pub is_infrared: bool,
}

/// Immutable, deterministically ordered set of images.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    images: Vec<CameraTrapImage>,
    index: HashMap<String, usize>,
    root: PathBuf,
}

impl Catalog {
    /// Builds a catalog from already-validated records, sorting by
    /// `(camera_id, captured_at, image_id)`.
    pub fn from_images(mut images: Vec<CameraTrapImage>, root: impl Into<PathBuf>) -> Result<Self, CatalogError> {
        images.sort_by(|a, b| {
            (&a.camera_id, a.captured_at, &a.image_id).cmp(&(&b.camera_id, b.captured_at, &b.image_id))
        });
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if index.insert(img.image_id.clone(), i).is_some() {
                return Err(CatalogError::DuplicateId(img.image_id.clone()));
            }
        }
        Ok(Self { images, index, root: root.into() })
    }

    pub fn images(&self) -> &[CameraTrapImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&CameraTrapImage> {
        self.index.get(image_id).map(|&i| &self.images[i])
    }

    pub fn cameras(&self) -> BTreeSet<&str> {
        self.images.iter().map(|i| i.camera_id.as_str()).collect()
    }

    /// Directory that relative `file` references resolve against.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve_file(&self, image: &CameraTrapImage) -> PathBuf {
        let p = Path::new(&image.file_ref);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Restricts the catalog to images matching `keep`, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(&CameraTrapImage) -> bool) -> Catalog {
        let images: Vec<_> = self.images.iter().filter(|i| keep(i)).cloned().collect();
        Catalog::from_images(images, self.root.clone()).expect("subset of a valid catalog")
    }

    /// Canonical line-delimited serialization (one manifest record per line).
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for img in &self.images {
            out.push_str(&serde_json::to_string(img).expect("image record serializes"));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, String> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(truncate_seconds(dt.with_timezone(&Utc)));
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .map(|n| n.and_utc())
        .map_err(|e| format!("bad ISO-8601 timestamp {s:?}: {e}"))
}

fn truncate_seconds(dt: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp(dt.timestamp(), 0).expect("in range")
}

pub(crate) fn format_timestamp(dt: &DateTime<Utc>) -> String {
    dt.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

mod timestamp {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(dt) => s.serialize_str(&super::format_timestamp(dt)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DateTime<Utc>>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        raw.map(|s| super::parse_timestamp(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}
