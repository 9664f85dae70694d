//! Per-image inference stages behind pluggable backends.
//!
//! Three roles exist: a region-proposal detector, a segmenter producing
//! foreground masks for crops, and classifiers producing softmax-style score
//! vectors. Each role can be served by a fixture table, a cheap pixel
//! heuristic, or an external process speaking a line-delimited JSON protocol.

mod external;
mod fixture;
mod heuristic;
mod mask;
mod preprocess;
mod project;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::CameraTrapImage;
use crate::geometry::{BoundingBox, PixelRect};
use crate::taxonomy::ClassTaxonomy;

pub use external::{
    run_external_backend, ExternalClassifier, ExternalDetector, ExternalInput, ExternalPool, ExternalRequest,
    ExternalResponse, ExternalSegmenter, DEFAULT_EXTERNAL_TIMEOUT_SECS,
};
pub use fixture::{ClassifierTableRow, DetectorTableRow, FixtureClassifier, FixtureDetector, FixtureSegmenter};
pub use heuristic::{mean_intensity, StubClassifier, StubDetector, StubSegmenter};
pub use mask::{composite_mask, Mask, MaskRle};
pub use preprocess::{letterbox, Fill, DEFAULT_INPUT_SIZE};
pub use project::ProjectingClassifier;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StageError {
    #[error("backend {backend}: {message}{}", if .diagnostics.is_empty() { String::new() } else { format!(" (stderr: {})", .diagnostics) })]
    Backend { backend: String, message: String, diagnostics: String },
    #[error("backend {backend}: protocol violation: {message}; line: {line}")]
    Protocol { backend: String, message: String, line: String },
    #[error("backend {backend}: timed out after {secs} s")]
    Timeout { backend: String, secs: u64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend {backend} needs pixels for {image_id} but none were loaded")]
    MissingPixels { backend: String, image_id: String },
    #[error("mask is {mask_w}x{mask_h} but crop is {crop_w}x{crop_h}")]
    MaskDimensions { mask_w: u32, mask_h: u32, crop_w: u32, crop_h: u32 },
}

/// A detector box forwarded to the local models regardless of the
/// detector's own class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    #[serde(default)]
    pub detector_class: String,
}

/// Which view of the frame a classifier saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Scale {
    Local { box_index: usize },
    Global,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Local { box_index } => write!(f, "local:{box_index}"),
            Scale::Global => f.write_str("global"),
        }
    }
}

impl From<Scale> for String {
    fn from(s: Scale) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for Scale {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl std::str::FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "global" {
            return Ok(Scale::Global);
        }
        s.strip_prefix("local:")
            .and_then(|i| i.parse().ok())
            .map(|box_index| Scale::Local { box_index })
            .ok_or_else(|| format!("bad scale {s:?} (expected global or local:<n>)"))
    }
}

/// Probability vector aligned with a taxonomy's classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub taxonomy: String,
    pub scores: Vec<f64>,
}

impl ClassScores {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(taxonomy: &ClassTaxonomy, scores: Vec<f64>) -> Result<Self, String> {
        let s = Self { taxonomy: taxonomy.name.clone(), scores };
        s.check(taxonomy.len())?;
        Ok(s)
    }

    fn check(&self, n: usize) -> Result<(), String> {
        if self.scores.len() != n {
            return Err(format!("{} scores for {n} classes", self.scores.len()));
        }
        if self.scores.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("score outside [0, 1]: {:?}", self.scores));
        }
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(format!("scores sum to {sum}"));
        }
        Ok(())
    }

    /// Index of the maximal score; ties go to the higher-priority class.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.scores.iter().enumerate() {
            if *v > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Fixture,
    HeuristicStub,
    ExternalProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Detector,
    Segmenter,
    Classifier,
}

impl BackendRole {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendRole::Detector => "detector",
            BackendRole::Segmenter => "segmenter",
            BackendRole::Classifier => "classifier",
        }
    }
}

/// Scalar config value; TOML/JSON strings, numbers and booleans all fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigValue::Bool(b) => write!(f, "{b}"),
            ConfigValue::Int(i) => write!(f, "{i}"),
            ConfigValue::Float(x) => write!(f, "{x}"),
            ConfigValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<&str> for ConfigValue {
    fn from(s: &str) -> Self {
        ConfigValue::Str(s.to_owned())
    }
}

/// Declares one backend slot. `id` names the model in votes and run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    #[serde(default)]
    pub id: String,
    pub kind: BackendKind,
    pub role: BackendRole,
    #[serde(default)]
    pub config: BTreeMap<String, ConfigValue>,
}

impl BackendDescriptor {
    pub fn new(id: &str, kind: BackendKind, role: BackendRole) -> Self {
        Self { id: id.to_owned(), kind, role, config: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<ConfigValue>) -> Self {
        self.config.insert(key.to_owned(), value.into());
        self
    }

    fn allowed_keys(&self) -> &'static [&'static str] {
        use BackendKind::*;
        use BackendRole::*;
        match (self.kind, self.role) {
            (Fixture, Detector) => &["table"],
            (Fixture, Segmenter) => &[],
            (Fixture, Classifier) => &["table", "model", "labels"],
            (HeuristicStub, Detector) => &["grid", "threshold", "stride"],
            (HeuristicStub, Segmenter) => &["tolerance"],
            (HeuristicStub, Classifier) => &["threshold", "classes", "winner_score"],
            (ExternalProcess, _) => &["command", "timeout_secs", "classes", "labels", "version", "inline"],
        }
    }

    fn required_keys(&self) -> &'static [&'static str] {
        use BackendKind::*;
        use BackendRole::*;
        match (self.kind, self.role) {
            (Fixture, Detector) => &["table"],
            (Fixture, Classifier) => &["table", "labels"],
            (ExternalProcess, Classifier) => &["command", "classes"],
            (ExternalProcess, _) => &["command"],
            _ => &[],
        }
    }

    pub fn validate(&self) -> Result<(), StageError> {
        let allowed = self.allowed_keys();
        for key in self.config.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(StageError::Config(format!(
                    "{:?} {} backend {:?} does not accept config key {key:?} (allowed: {allowed:?})",
                    self.kind,
                    self.role.as_str(),
                    self.id
                )));
            }
        }
        for key in self.required_keys() {
            if !self.config.contains_key(*key) {
                return Err(StageError::Config(format!(
                    "{:?} {} backend {:?} requires config key {key:?}",
                    self.kind,
                    self.role.as_str(),
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.config.get(key).map(ToString::to_string)
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, StageError> {
        match self.config.get(key) {
            None => Ok(None),
            Some(v) => v
                .to_string()
                .parse()
                .map(Some)
                .map_err(|_| StageError::Config(format!("backend {:?}: bad value {v} for {key:?}", self.id))),
        }
    }

    pub fn get_labels(&self) -> Option<Vec<String>> {
        self.get_str("labels")
            .map(|s| s.split(',').map(|l| l.trim().to_owned()).filter(|l| !l.is_empty()).collect())
    }

    /// Resolves a path-valued key against `base_dir`.
    pub fn get_path(&self, key: &str, base_dir: &Path) -> Option<PathBuf> {
        self.get_str(key).map(|p| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        })
    }
}

/// A whole frame handed to a detector.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub image: &'a CameraTrapImage,
    pub pixels: Option<&'a RgbImage>,
    pub file: Option<&'a Path>,
}

/// A crop handed to a segmenter. `rect` is the crop's place in the frame.
#[derive(Debug, Clone, Copy)]
pub struct SegmentInput<'a> {
    pub image: &'a CameraTrapImage,
    pub box_index: usize,
    pub rect: PixelRect,
    pub crop: Option<&'a RgbImage>,
}

/// A classifier input: a preprocessed crop or whole frame.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierInput<'a> {
    pub image_id: &'a str,
    pub scale: Scale,
    pub masked: bool,
    pub pixels: Option<&'a RgbImage>,
}

pub trait Detector: Send + Sync {
    fn id(&self) -> &str;
    fn version(&self) -> String;
    fn needs_pixels(&self) -> bool;
    /// Raw proposals, unfiltered and unsorted.
    fn propose(&self, input: &FrameInput<'_>, min_confidence: f64) -> Result<Vec<RegionProposal>, StageError>;
}

pub trait Segmenter: Send + Sync {
    fn id(&self) -> &str;
    fn version(&self) -> String;
    fn needs_pixels(&self) -> bool;
    fn segment(&self, input: &SegmentInput<'_>) -> Result<Mask, StageError>;
}

pub trait Classifier: Send + Sync {
    fn id(&self) -> &str;
    fn version(&self) -> String;
    fn needs_pixels(&self) -> bool;
    /// Number of classes emitted, or `None` if the backend adapts to any
    /// taxonomy size.
    fn declared_classes(&self) -> Option<usize>;
    /// Class labels in score order when the backend knows them.
    fn declared_labels(&self) -> Option<Vec<String>> {
        None
    }
    /// Raw score vector of length `n_classes`.
    fn score(&self, input: &ClassifierInput<'_>, n_classes: usize) -> Result<Vec<f64>, StageError>;
}

/// Proposals with `confidence >= min_confidence`, by descending confidence
/// then box order. The detector's class label is carried, never filtered on.
pub fn detect_regions(
    backend: &dyn Detector,
    input: &FrameInput<'_>,
    min_confidence: f64,
) -> Result<Vec<RegionProposal>, StageError> {
    if !(0.0..=1.0).contains(&min_confidence) {
        return Err(StageError::Config(format!("min_confidence {min_confidence} outside [0, 1]")));
    }
    let mut proposals = backend.propose(input, min_confidence)?;
    for p in &proposals {
        if !(0.0..=1.0).contains(&p.confidence) {
            return Err(StageError::Protocol {
                backend: backend.id().to_owned(),
                message: format!("confidence {} outside [0, 1]", p.confidence),
                line: serde_json::to_string(p).unwrap_or_default(),
            });
        }
    }
    proposals.retain(|p| p.confidence >= min_confidence);
    proposals.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.bbox.lexicographic_cmp(&b.bbox)));
    Ok(proposals)
}

/// Normalization slack accepted from backends before rejecting the output.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

pub fn classify(
    backend: &dyn Classifier,
    input: &ClassifierInput<'_>,
    taxonomy: &ClassTaxonomy,
) -> Result<ClassScores, StageError> {
    if let Some(n) = backend.declared_classes() {
        if n != taxonomy.len() {
            return Err(StageError::Config(format!(
                "classifier {} declares {n} classes but taxonomy {} has {}",
                backend.id(),
                taxonomy.name,
                taxonomy.len()
            )));
        }
    }
    let raw = backend.score(input, taxonomy.len())?;
    let protocol = |message: String| StageError::Protocol {
        backend: backend.id().to_owned(),
        message,
        line: format!("{raw:?}"),
    };
    if raw.len() != taxonomy.len() {
        return Err(protocol(format!("{} scores for {} classes", raw.len(), taxonomy.len())));
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(protocol("negative or non-finite score".into()));
    }
    let sum: f64 = raw.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(protocol(format!("scores sum to {sum}")));
    }
    let scores = raw.iter().map(|v| (v / sum).min(1.0)).collect();
    ClassScores::new(taxonomy, scores).map_err(protocol)
}

pub fn build_detector(desc: &BackendDescriptor, base_dir: &Path) -> Result<Box<dyn Detector>, StageError> {
    check_role(desc, BackendRole::Detector)?;
    Ok(match desc.kind {
        BackendKind::Fixture => Box::new(FixtureDetector::from_descriptor(desc, base_dir)?),
        BackendKind::HeuristicStub => Box::new(StubDetector::from_descriptor(desc)?),
        BackendKind::ExternalProcess => Box::new(ExternalDetector::new(ExternalPool::from_descriptor(desc)?)),
    })
}

pub fn build_segmenter(desc: &BackendDescriptor, _base_dir: &Path) -> Result<Box<dyn Segmenter>, StageError> {
    check_role(desc, BackendRole::Segmenter)?;
    Ok(match desc.kind {
        BackendKind::Fixture => Box::new(FixtureSegmenter::new(&desc.id)),
        BackendKind::HeuristicStub => Box::new(StubSegmenter::from_descriptor(desc)?),
        BackendKind::ExternalProcess => Box::new(ExternalSegmenter::new(ExternalPool::from_descriptor(desc)?)),
    })
}

pub fn build_classifier(desc: &BackendDescriptor, base_dir: &Path) -> Result<Box<dyn Classifier>, StageError> {
    check_role(desc, BackendRole::Classifier)?;
    Ok(match desc.kind {
        BackendKind::Fixture => Box::new(FixtureClassifier::from_descriptor(desc, base_dir)?),
        BackendKind::HeuristicStub => Box::new(StubClassifier::from_descriptor(desc)?),
        BackendKind::ExternalProcess => Box::new(ExternalClassifier::new(ExternalPool::from_descriptor(desc)?, desc)?),
    })
}

fn check_role(desc: &BackendDescriptor, role: BackendRole) -> Result<(), StageError> {
    if desc.role != role {
        return Err(StageError::Config(format!(
            "backend {:?} has role {} where a {} is required",
            desc.id,
            desc.role.as_str(),
            role.as_str()
        )));
    }
    desc.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ImageSource;
    use crate::taxonomy::TaxonomyRegistry;

    struct Canned(Vec<RegionProposal>);

    impl Detector for Canned {
        fn id(&self) -> &str {
            "canned"
        }
        fn version(&self) -> String {
            "0".into()
        }
        fn needs_pixels(&self) -> bool {
            false
        }
        fn propose(&self, _: &FrameInput<'_>, _: f64) -> Result<Vec<RegionProposal>, StageError> {
            Ok(self.0.clone())
        }
    }

    struct Raw(Vec<f64>);

    impl Classifier for Raw {
        fn id(&self) -> &str {
            "raw"
        }
        fn version(&self) -> String {
            "0".into()
        }
        fn needs_pixels(&self) -> bool {
            false
        }
        fn declared_classes(&self) -> Option<usize> {
            Some(self.0.len())
        }
        fn score(&self, _: &ClassifierInput<'_>, _: usize) -> Result<Vec<f64>, StageError> {
            Ok(self.0.clone())
        }
    }

    fn frame() -> CameraTrapImage {
        CameraTrapImage {
            image_id: "img".into(),
            camera_id: "C1".into(),
            captured_at: None,
            file_ref: String::new(),
            width_px: 100,
            height_px: 100,
            source: ImageSource::Wild,
            is_infrared: false,
        }
    }

    fn prop(conf: f64, class: &str, x: f64) -> RegionProposal {
        RegionProposal { bbox: BoundingBox::new(x, 0.1, x + 0.2, 0.3).unwrap(), confidence: conf, detector_class: class.into() }
    }

    fn detect(d: &Canned, t: f64) -> Vec<RegionProposal> {
        let img = frame();
        detect_regions(d, &FrameInput { image: &img, pixels: None, file: None }, t).unwrap()
    }

    #[test]
    fn threshold_semantics() {
        let d = Canned(vec![prop(0.9, "animal", 0.1), prop(0.2, "animal", 0.5)]);
        assert!(detect(&d, 1.0).is_empty());
        assert_eq!(detect(&d, 0.5).len(), 1);
        let exact = Canned(vec![prop(1.0, "animal", 0.1)]);
        assert_eq!(detect(&exact, 1.0).len(), 1);
    }

    #[test]
    fn detector_class_is_never_a_filter() {
        let d = Canned(vec![prop(0.7, "vehicle", 0.5), prop(0.8, "dog", 0.1)]);
        let out = detect(&d, 0.5);
        assert_eq!(out.iter().map(|p| p.detector_class.as_str()).collect::<Vec<_>>(), ["dog", "vehicle"]);
    }

    #[test]
    fn equal_confidence_sorted_by_box() {
        let d = Canned(vec![prop(0.5, "a", 0.6), prop(0.5, "a", 0.2)]);
        let out = detect(&d, 0.1);
        assert!(out[0].bbox.x_min() < out[1].bbox.x_min());
    }

    #[test]
    fn classify_checks_count_and_normalization() {
        let reg = TaxonomyRegistry::builtin();
        let two = reg.get("two_class").unwrap();
        let four = reg.get("four_class").unwrap();
        let input = ClassifierInput { image_id: "x", scale: Scale::Global, masked: false, pixels: None };
        let e = classify(&Raw(vec![0.25; 4]), &input, two).unwrap_err();
        assert!(matches!(e, StageError::Config(_)));
        let s = classify(&Raw(vec![0.25; 4]), &input, four).unwrap();
        assert_eq!(s.scores, vec![0.25; 4]);
        let s = classify(&Raw(vec![0.2505, 0.25, 0.25, 0.25]), &input, four).unwrap();
        assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(classify(&Raw(vec![0.3, 0.25, 0.25, 0.25]), &input, four), Err(StageError::Protocol { .. })));
    }

    #[test]
    fn argmax_ties_prefer_priority() {
        let s = ClassScores { taxonomy: "t".into(), scores: vec![0.1, 0.4, 0.4, 0.1] };
        assert_eq!(s.argmax(), 1);
    }

    #[test]
    fn descriptor_key_validation() {
        let d = BackendDescriptor::new("d", BackendKind::Fixture, BackendRole::Detector);
        assert!(d.validate().is_err(), "table required");
        let d = d.with("table", "x.ndjson").with("bogus", "1");
        assert!(d.validate().is_err());
        let c = BackendDescriptor::new("c", BackendKind::HeuristicStub, BackendRole::Classifier).with("threshold", ConfigValue::Float(100.0));
        assert!(c.validate().is_ok());
        assert_eq!(c.get_parsed::<f64>("threshold").unwrap(), Some(100.0));
        assert!(build_detector(&c, Path::new(".")).is_err(), "role mismatch");
    }

    #[test]
    fn scale_parses() {
        assert_eq!("local:3".parse::<Scale>().unwrap(), Scale::Local { box_index: 3 });
        assert_eq!(Scale::Global.to_string(), "global");
        assert!("local:x".parse::<Scale>().is_err());
    }
}
