//! Table-driven backends: canned outputs keyed by image, used for
//! reproducible end-to-end runs without trained models.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    BackendDescriptor, Classifier, ClassifierInput, Detector, FrameInput, Mask, RegionProposal, Scale, SegmentInput,
    Segmenter, StageError,
};
use crate::seed::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTableRow {
    pub image_id: String,
    pub proposals: Vec<RegionProposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTableRow {
    pub model: String,
    pub image_id: String,
    pub scale: Scale,
    pub masked: bool,
    pub scores: Vec<f64>,
}

fn read_table<T: for<'de> Deserialize<'de>>(
    backend: &str,
    path: &Path,
    mut each: impl FnMut(T),
) -> Result<String, StageError> {
    let text = fs::read_to_string(path)
        .map_err(|e| StageError::Config(format!("backend {backend}: cannot read table {}: {e}", path.display())))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(line).map_err(|e| {
            StageError::Config(format!("backend {backend}: {}:{}: {e}", path.display(), i + 1))
        })?;
        each(row);
    }
    Ok(sha256_hex(text.as_bytes())[..12].to_owned())
}

pub struct FixtureDetector {
    id: String,
    table: HashMap<String, Vec<RegionProposal>>,
    digest: String,
}

impl FixtureDetector {
    pub fn from_descriptor(desc: &BackendDescriptor, base_dir: &Path) -> Result<Self, StageError> {
        let path = desc.get_path("table", base_dir).expect("validated");
        let mut table = HashMap::new();
        let digest = read_table(&desc.id, &path, |row: DetectorTableRow| {
            table.insert(row.image_id, row.proposals);
        })?;
        Ok(Self { id: desc.id.clone(), table, digest })
    }

    pub fn from_rows(id: &str, rows: impl IntoIterator<Item = DetectorTableRow>) -> Self {
        Self {
            id: id.to_owned(),
            table: rows.into_iter().map(|r| (r.image_id, r.proposals)).collect(),
            digest: "inline".into(),
        }
    }
}

impl Detector for FixtureDetector {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> String {
        format!("fixture:{}", self.digest)
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn propose(&self, input: &FrameInput<'_>, _min_confidence: f64) -> Result<Vec<RegionProposal>, StageError> {
        Ok(self.table.get(&input.image.image_id).cloned().unwrap_or_default())
    }
}

/// Ellipse inscribed in the crop: a deterministic stand-in for an instance
/// segmenter that needs only the crop size.
pub struct FixtureSegmenter {
    id: String,
}

impl FixtureSegmenter {
    pub fn new(id: &str) -> Self {
        Self { id: id.to_owned() }
    }
}

impl Segmenter for FixtureSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> String {
        "fixture:ellipse".into()
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn segment(&self, input: &SegmentInput<'_>) -> Result<Mask, StageError> {
        let (w, h) = (input.rect.width(), input.rect.height());
        let (cx, cy) = (f64::from(w) / 2.0, f64::from(h) / 2.0);
        Ok(Mask::from_fn(w, h, |x, y| {
            let dx = (f64::from(x) + 0.5 - cx) / cx;
            let dy = (f64::from(y) + 0.5 - cy) / cy;
            dx * dx + dy * dy <= 1.0
        }))
    }
}

type ScoreKey = (String, Scale, bool);

pub struct FixtureClassifier {
    id: String,
    labels: Vec<String>,
    table: HashMap<ScoreKey, Vec<f64>>,
    digest: String,
}

impl FixtureClassifier {
    pub fn from_descriptor(desc: &BackendDescriptor, base_dir: &Path) -> Result<Self, StageError> {
        let path = desc.get_path("table", base_dir).expect("validated");
        let model = desc.get_str("model").unwrap_or_else(|| desc.id.clone());
        let labels = desc.get_labels().expect("validated");
        let mut table = HashMap::new();
        let mut bad_len = None;
        let digest = read_table(&desc.id, &path, |row: ClassifierTableRow| {
            if row.model == model {
                if row.scores.len() != labels.len() {
                    bad_len.get_or_insert(row.scores.len());
                }
                table.insert((row.image_id, row.scale, row.masked), row.scores);
            }
        })?;
        if let Some(n) = bad_len {
            return Err(StageError::Config(format!(
                "backend {}: table rows carry {n} scores but {} labels are declared",
                desc.id,
                labels.len()
            )));
        }
        Ok(Self { id: desc.id.clone(), labels, table, digest })
    }

    pub fn from_rows(id: &str, labels: &[&str], rows: impl IntoIterator<Item = ClassifierTableRow>) -> Self {
        Self {
            id: id.to_owned(),
            labels: labels.iter().map(|l| (*l).to_owned()).collect(),
            table: rows
                .into_iter()
                .filter(|r| r.model == id)
                .map(|r| ((r.image_id, r.scale, r.masked), r.scores))
                .collect(),
            digest: "inline".into(),
        }
    }
}

impl Classifier for FixtureClassifier {
    fn id(&self) -> &str {
        &self.id
    }

    fn version(&self) -> String {
        format!("fixture:{}", self.digest)
    }

    fn needs_pixels(&self) -> bool {
        false
    }

    fn declared_classes(&self) -> Option<usize> {
        Some(self.labels.len())
    }

    fn declared_labels(&self) -> Option<Vec<String>> {
        Some(self.labels.clone())
    }

    fn score(&self, input: &ClassifierInput<'_>, _n: usize) -> Result<Vec<f64>, StageError> {
        self.table
            .get(&(input.image_id.to_owned(), input.scale, input.masked))
            .cloned()
            .ok_or_else(|| StageError::Backend {
                backend: self.id.clone(),
                message: format!(
                    "fixture has no scores for image {} at {} (masked={})",
                    input.image_id, input.scale, input.masked
                ),
                diagnostics: String::new(),
            })
    }
}
