use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AggregationPolicy, EnsembleError, VoteMethod};
use crate::pixels::PixelSourceKind;
use crate::seed::sha256_hex;
use crate::stages::{BackendDescriptor, BackendKind, BackendRole, ConfigValue, Fill, DEFAULT_INPUT_SIZE};

/// Most local or global classifiers one pipeline may run.
pub const MAX_MODELS_PER_SCALE: usize = 3;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.1;
pub const DEFAULT_MAX_FAILURE_FRACTION: f64 = 0.01;

/// A backend slot in a config file; the role is implied by the slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotDescriptor {
    #[serde(default)]
    pub id: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, ConfigValue>,
}

impl SlotDescriptor {
    pub fn new(id: &str, kind: BackendKind) -> Self {
        Self { id: id.to_owned(), kind, config: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<ConfigValue>) -> Self {
        self.config.insert(key.to_owned(), value.into());
        self
    }

    pub fn descriptor(&self, role: BackendRole) -> BackendDescriptor {
        BackendDescriptor { id: self.id.clone(), kind: self.kind, role, config: self.config.clone() }
    }
}

fn default_workers() -> usize {
    1
}
fn default_taxonomy() -> String {
    "four_class".into()
}
fn yes() -> bool {
    true
}
fn default_min_confidence() -> f64 {
    DEFAULT_MIN_CONFIDENCE
}
fn default_input_size() -> u32 {
    DEFAULT_INPUT_SIZE
}
fn default_max_failure_fraction() -> f64 {
    DEFAULT_MAX_FAILURE_FRACTION
}

/// Everything a pipeline run depends on. Loaded from TOML; relative paths in
/// backend configs resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_taxonomy")]
    pub taxonomy: String,
    /// Extra taxonomy documents to register before resolving `taxonomy`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub taxonomy_files: Vec<PathBuf>,
    #[serde(default)]
    pub vote_method: VoteMethod,
    #[serde(default)]
    pub aggregation: AggregationPolicy,
    #[serde(default = "yes")]
    pub global_fallback: bool,
    #[serde(default)]
    pub segmentation: bool,
    #[serde(default = "default_min_confidence")]
    pub min_confidence: f64,
    #[serde(default)]
    pub crop_pad: f64,
    #[serde(default = "default_input_size")]
    pub input_size: u32,
    #[serde(default)]
    pub fill: Fill,
    #[serde(default = "default_max_failure_fraction")]
    pub max_failure_fraction: f64,
    #[serde(default)]
    pub pixel_source: PixelSourceKind,
    pub detector: SlotDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<SlotDescriptor>,
    #[serde(default)]
    pub local_models: Vec<SlotDescriptor>,
    #[serde(default)]
    pub global_models: Vec<SlotDescriptor>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    /// A config with defaults everywhere and the given detector.
    pub fn new(detector: SlotDescriptor) -> Self {
        Self {
            seed: 0,
            workers: default_workers(),
            taxonomy: default_taxonomy(),
            taxonomy_files: Vec::new(),
            vote_method: VoteMethod::default(),
            aggregation: AggregationPolicy::default(),
            global_fallback: true,
            segmentation: false,
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            crop_pad: 0.0,
            input_size: DEFAULT_INPUT_SIZE,
            fill: Fill::default(),
            max_failure_fraction: DEFAULT_MAX_FAILURE_FRACTION,
            pixel_source: PixelSourceKind::default(),
            detector,
            segmenter: None,
            local_models: Vec::new(),
            global_models: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, EnsembleError> {
        let mut c: PipelineConfig = toml::from_str(text).map_err(|e| EnsembleError::Config(e.to_string()))?;
        c.base_dir = base_dir.to_path_buf();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EnsembleError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base).map_err(|e| match e {
            EnsembleError::Config(m) => EnsembleError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Effective config with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Identity of the run's semantics. The worker count is excluded: it
    /// never changes results.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::Config(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return bad(format!("min_confidence {} outside [0, 1]", self.min_confidence));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad(format!("max_failure_fraction {} outside [0, 1]", self.max_failure_fraction));
        }
        if !(self.crop_pad >= 0.0 && self.crop_pad.is_finite()) {
            return bad(format!("crop_pad {} must be a non-negative number", self.crop_pad));
        }
        if self.input_size == 0 {
            return bad("input_size must be positive".into());
        }
        for (scale, models) in [("local", &self.local_models), ("global", &self.global_models)] {
            if models.len() > MAX_MODELS_PER_SCALE {
                return bad(format!(
                    "{} {scale} models configured; at most {MAX_MODELS_PER_SCALE} are allowed",
                    models.len()
                ));
            }
            let mut seen = BTreeSet::new();
            for m in models.iter() {
                if m.id.is_empty() {
                    return bad(format!("every {scale} model needs an id"));
                }
                if !seen.insert(&m.id) {
                    return bad(format!("duplicate {scale} model id {:?}", m.id));
                }
                m.descriptor(BackendRole::Classifier).validate().map_err(|e| EnsembleError::Config(e.to_string()))?;
            }
        }
        if self.local_models.is_empty() && self.global_models.is_empty() {
            return bad("no classifiers configured".into());
        }
        if self.segmentation && self.segmenter.is_none() {
            return bad("segmentation is on but no segmenter is configured".into());
        }
        self.detector_descriptor().validate().map_err(|e| EnsembleError::Config(e.to_string()))?;
        if let Some(s) = self.segmenter_descriptor() {
            s.validate().map_err(|e| EnsembleError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn detector_descriptor(&self) -> BackendDescriptor {
        let mut d = self.detector.descriptor(BackendRole::Detector);
        if d.id.is_empty() {
            d.id = "detector".into();
        }
        d
    }

    pub fn segmenter_descriptor(&self) -> Option<BackendDescriptor> {
        self.segmenter.as_ref().map(|s| {
            let mut d = s.descriptor(BackendRole::Segmenter);
            if d.id.is_empty() {
                d.id = "segmenter".into();
            }
            d
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
        seed = 7
        vote_method = "hierarchical"
        fill = "black"

        [detector]
        kind = "heuristic_stub"

        [[local_models]]
        id = "a"
        kind = "heuristic_stub"
    "#;

    #[test]
    fn defaults_expand() {
        let c = PipelineConfig::from_toml_str(DOC, Path::new("/cfg")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.min_confidence, 0.1);
        assert_eq!(c.fill, Fill::BLACK);
        assert_eq!(c.vote_method, VoteMethod::Hierarchical);
        assert_eq!(c.aggregation, AggregationPolicy::Priority);
        assert_eq!(c.input_size, 224);
        assert_eq!(c.base_dir, Path::new("/cfg"));
        let again = PipelineConfig::from_toml_str(&c.to_toml(), Path::new("/cfg")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn model_count_bound() {
        let mut doc = DOC.to_owned();
        for id in ["b", "c", "d"] {
            doc.push_str(&format!("[[local_models]]\nid = \"{id}\"\nkind = \"heuristic_stub\"\n"));
        }
        let e = PipelineConfig::from_toml_str(&doc, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("at most 3"), "{e}");
    }

    #[test]
    fn rejects_inconsistent_settings() {
        let with = |extra: &str| PipelineConfig::from_toml_str(&format!("{extra}\n{DOC}"), Path::new("."));
        assert!(with("segmentation = true").is_err());
        assert!(with("workers = 0").is_err());
        assert!(with("min_confidence = 1.5").is_err());
        assert!(with("bogus = 1").is_err());
    }

    #[test]
    fn hash_ignores_workers() {
        let a = PipelineConfig::from_toml_str(DOC, Path::new(".")).unwrap();
        let mut b = a.clone();
        b.workers = 8;
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 8;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
