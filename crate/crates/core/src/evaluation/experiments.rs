//! The experiment grid: named dataset/pipeline variants, each materialized
//! from one suite file, run through the pipeline and evaluated.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{estimate_review_savings, evaluate, EvaluationError, EvaluationReport, DEFAULT_REVIEW_RATE_PER_MINUTE};
use crate::catalog::{
    group_bursts, ingest_manifest, parse_box_annotations, Annotation, Burst, BurstPolicy, Catalog, ImageSource,
    IngestOptions, LabelSet,
};
use crate::curation::{
    burst_split, camera_holdout_split, sample_background_boxes, to_base_vocabulary, Split, SplitAssignment,
    DEFAULT_BACKGROUND_SIZE_RANGE, DEFAULT_RETRY_BUDGET,
};
use crate::ensemble::{run_pipeline, DEFAULT_MIN_CONFIDENCE, AggregationPolicy, PipelineConfig, RunOutput, SlotDescriptor, VoteMethod};
use crate::pixels::PixelSourceKind;
use crate::stages::Fill;
use crate::taxonomy::{ClassTaxonomy, TaxonomyRegistry};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ExperimentId {
    T2Burst,
    T2Holdout(String),
    T3,
    T4Hier,
    T4Best,
    T6a,
    T6b,
    T7,
    T8a,
    T8b,
    T8c,
}

pub const VALID_EXPERIMENT_IDS: &str = "T2_burst, T2_holdout(<camera>), T3, T4_hier, T4_best, T6a, T6b, T7, T8a, T8b, T8c";

impl ExperimentId {
    /// The full grid with camera hold-out run once per given camera.
    pub fn grid(holdout_cameras: &[String]) -> Vec<ExperimentId> {
        use ExperimentId::*;
        let mut out = vec![T2Burst];
        out.extend(holdout_cameras.iter().map(|c| T2Holdout(c.clone())));
        out.extend([T3, T4Hier, T4Best, T6a, T6b, T7, T8a, T8b, T8c]);
        out
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ExperimentId::*;
        match self {
            T2Burst => f.write_str("T2_burst"),
            T2Holdout(c) => write!(f, "T2_holdout({c})"),
            T3 => f.write_str("T3"),
            T4Hier => f.write_str("T4_hier"),
            T4Best => f.write_str("T4_best"),
            T6a => f.write_str("T6a"),
            T6b => f.write_str("T6b"),
            T7 => f.write_str("T7"),
            T8a => f.write_str("T8a"),
            T8b => f.write_str("T8b"),
            T8c => f.write_str("T8c"),
        }
    }
}

impl FromStr for ExperimentId {
    type Err = EvaluationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        use ExperimentId::*;
        let s = s.trim();
        Ok(match s {
            "T2_burst" => T2Burst,
            "T3" => T3,
            "T4_hier" => T4Hier,
            "T4_best" => T4Best,
            "T6a" => T6a,
            "T6b" => T6b,
            "T7" => T7,
            "T8a" => T8a,
            "T8b" => T8b,
            "T8c" => T8c,
            _ => match s.strip_prefix("T2_holdout(").and_then(|r| r.strip_suffix(')')) {
                Some(cam) if !cam.is_empty() => T2Holdout(cam.to_owned()),
                _ => return Err(EvaluationError::UnknownExperiment { id: s.to_owned(), valid: VALID_EXPERIMENT_IDS.into() }),
            },
        })
    }
}

impl From<ExperimentId> for String {
    fn from(e: ExperimentId) -> Self {
        e.to_string()
    }
}

impl TryFrom<String> for ExperimentId {
    type Error = EvaluationError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    /// Test partition of the captivity images.
    CaptivityTest,
    /// Every wild image.
    Wild,
}

impl EvalSet {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSet::CaptivityTest => "captivity_test",
            EvalSet::Wild => "wild",
        }
    }
}

/// What one experiment id means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub description: String,
    /// `None` = burst-based split; `Some(c)` = hold out camera `c`.
    pub holdout: Option<String>,
    pub label_set: LabelSet,
    pub taxonomy: String,
    pub use_local: bool,
    pub use_global: bool,
    pub vote_method: VoteMethod,
    pub aggregation: AggregationPolicy,
    pub segmentation: bool,
    pub eval_set: EvalSet,
}

impl ExperimentSpec {
    pub fn for_id(id: &ExperimentId) -> Self {
        use ExperimentId::*;
        let base = |description: &str| ExperimentSpec {
            id: id.clone(),
            description: description.to_owned(),
            holdout: None,
            label_set: LabelSet::Set1,
            taxonomy: "four_class".into(),
            use_local: true,
            use_global: false,
            vote_method: VoteMethod::BestAccuracy,
            aggregation: AggregationPolicy::Priority,
            segmentation: false,
            eval_set: EvalSet::Wild,
        };
        let ensemble = |description: &str, method| ExperimentSpec {
            use_global: true,
            vote_method: method,
            aggregation: AggregationPolicy::Pooled,
            ..base(description)
        };
        let set2 = |description: &str, taxonomy: &str, segmentation| ExperimentSpec {
            label_set: LabelSet::Set2,
            taxonomy: taxonomy.into(),
            segmentation,
            ..base(description)
        };
        match id {
            T2Burst => ExperimentSpec { eval_set: EvalSet::CaptivityTest, ..base("Burst-Based Split") },
            T2Holdout(c) => ExperimentSpec {
                holdout: Some(c.clone()),
                eval_set: EvalSet::CaptivityTest,
                ..base(&format!("Camera Hold-Out Split (Camera {c})"))
            },
            T3 => ensemble("Local and Global Models", VoteMethod::BestAccuracy),
            T4Hier => ensemble("Ensemble Vote (Hierarchical)", VoteMethod::Hierarchical),
            T4Best => ensemble("Ensemble Vote (Best Accuracy)", VoteMethod::BestAccuracy),
            T6a => set2("Captivity Set 2", "four_class", false),
            T6b => set2("Captivity Set 2 (Wildcat Day/Night Separated)", "five_class", false),
            T7 => set2("Segmented Local Models", "four_class", true),
            T8a => set2("Two Class Model (Segmented)", "two_class", true),
            T8b => set2("Two Class Model", "two_class", false),
            T8c => set2("Two Class Model (Animal Unknown Removed, Segmented)", "two_class_no_unknown", true),
        }
    }

    /// Models used on the Captivity-only tests are a single architecture.
    fn single_model(&self) -> bool {
        matches!(self.id, ExperimentId::T2Burst | ExperimentId::T2Holdout(_))
    }
}

fn default_split_fractions() -> [f64; 3] {
    [0.7, 0.2, 0.1]
}
fn default_holdout_fractions() -> [f64; 2] {
    [0.7 / 0.9, 0.2 / 0.9]
}
fn default_review_rate() -> f64 {
    DEFAULT_REVIEW_RATE_PER_MINUTE
}
fn default_workers() -> usize {
    1
}
fn default_min_confidence() -> f64 {
    DEFAULT_MIN_CONFIDENCE
}
fn default_background_per_image() -> usize {
    1
}

/// Suite file: data locations, backends and shared settings for the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSuite {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub manifest: PathBuf,
    /// Holds `set1/`, `set2/` and `wild/`, one `<image_id>.xml` per image.
    pub annotations_dir: PathBuf,
    #[serde(default)]
    pub no_pixels: bool,
    #[serde(default)]
    pub burst_policy: BurstPolicy,
    #[serde(default = "default_split_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default = "default_holdout_fractions")]
    pub holdout_fractions: [f64; 2],
    #[serde(default = "default_background_per_image")]
    pub background_boxes_per_image: usize,
    #[serde(default = "default_review_rate")]
    pub review_rate_per_minute: f64,
    /// Labels whose images are removed from manual review; defaults to the
    /// taxonomy's fallback class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_discard: Option<Vec<String>>,
    #[serde(default)]
    pub pixel_source: PixelSourceKind,
    #[serde(default = "default_min_confidence")]
    pub min_confidence: f64,
    #[serde(default)]
    pub crop_pad: f64,
    #[serde(default)]
    pub fill: Fill,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub taxonomy_files: Vec<PathBuf>,
    pub detector: SlotDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<SlotDescriptor>,
    /// Classifier architectures; each serves as a local and a global model.
    pub models: Vec<SlotDescriptor>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentSuite {
    pub fn load(path: &Path) -> Result<Self, EvaluationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvaluationError::Suite(format!("cannot read {}: {e}", path.display())))?;
        let mut s: ExperimentSuite =
            toml::from_str(&text).map_err(|e| EvaluationError::Suite(format!("{}: {e}", path.display())))?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if s.models.is_empty() {
            return Err(EvaluationError::Suite("suite lists no models".into()));
        }
        Ok(s)
    }
}

/// Loaded suite data shared by every experiment.
pub struct ExperimentContext {
    pub suite: ExperimentSuite,
    pub catalog: Catalog,
    pub annotations: BTreeMap<LabelSet, HashMap<String, Annotation>>,
    pub registry: TaxonomyRegistry,
    pub bursts: Vec<Burst>,
}

impl ExperimentContext {
    pub fn load(suite_path: &Path) -> Result<Self, EvaluationError> {
        Self::from_suite(ExperimentSuite::load(suite_path)?)
    }

    pub fn from_suite(suite: ExperimentSuite) -> Result<Self, EvaluationError> {
        let catalog = ingest_manifest(&suite.base_dir.join(&suite.manifest), IngestOptions { no_pixels: suite.no_pixels })?;
        let mut registry = TaxonomyRegistry::builtin();
        for f in &suite.taxonomy_files {
            registry.load_file(&suite.base_dir.join(f))?;
        }
        let ann_root = suite.base_dir.join(&suite.annotations_dir);
        let mut annotations = BTreeMap::new();
        for (set, dir, source) in [
            (LabelSet::Set1, "set1", ImageSource::Captivity),
            (LabelSet::Set2, "set2", ImageSource::Captivity),
            (LabelSet::Wild, "wild", ImageSource::Wild),
        ] {
            let mut by_id = HashMap::new();
            for img in catalog.images().iter().filter(|i| i.source == source) {
                let path = ann_root.join(dir).join(format!("{}.xml", img.image_id));
                if !path.exists() {
                    continue;
                }
                let parsed = parse_box_annotations(&path, img, set)?;
                for w in &parsed.warnings {
                    tracing::warn!(image_id = %w.image_id, object = w.object_index, "{}", w.message);
                }
                by_id.insert(img.image_id.clone(), parsed.annotation);
            }
            annotations.insert(set, by_id);
        }
        let captivity: Vec<_> = catalog.images().iter().filter(|i| i.source == ImageSource::Captivity).cloned().collect();
        let bursts = group_bursts(&captivity, &suite.burst_policy)?;
        Ok(Self { suite, catalog, annotations, registry, bursts })
    }

    /// Captivity cameras in sorted order.
    pub fn captivity_cameras(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.bursts.iter().map(|b| b.camera_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Accepts a camera id or a 1-based index into the sorted captivity cameras.
    pub fn resolve_camera(&self, c: &str) -> Result<String, EvaluationError> {
        let cams = self.captivity_cameras();
        if cams.iter().any(|k| k == c) {
            return Ok(c.to_owned());
        }
        match c.parse::<usize>() {
            Ok(n) if (1..=cams.len()).contains(&n) => Ok(cams[n - 1].clone()),
            _ => Err(EvaluationError::UnknownCamera { camera: c.to_owned(), known: cams }),
        }
    }
}

/// Per-run knobs that never change what an experiment means.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExperimentOverrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

pub struct ExperimentRun {
    pub spec: ExperimentSpec,
    pub split: SplitAssignment,
    pub pipeline_config: PipelineConfig,
    pub run: RunOutput,
    pub report: EvaluationReport,
    pub ground_truth: Vec<(String, String)>,
}

/// Image label under `taxonomy`: boxes are lifted to the five-class
/// vocabulary, projected (dropping removed classes), and the highest-priority
/// label wins; no boxes → fallback class.
pub fn ground_truth_label(
    annotation: &Annotation,
    image: &crate::catalog::CameraTrapImage,
    projection: &BTreeMap<String, Option<String>>,
    taxonomy: &ClassTaxonomy,
) -> Result<String, EvaluationError> {
    let base = to_base_vocabulary(annotation, image);
    let mut best: Option<usize> = None;
    for b in &base.boxes {
        let mapped = projection.get(&b.label).ok_or_else(|| EvaluationError::UnknownLabel {
            label: b.label.clone(),
            taxonomy: taxonomy.name.clone(),
        })?;
        if let Some(l) = mapped {
            let p = taxonomy.priority(l).expect("projection lands in taxonomy");
            best = Some(best.map_or(p, |q| q.min(p)));
        }
    }
    Ok(best.map_or_else(|| taxonomy.fallback_label().to_owned(), |p| taxonomy.classes[p].clone()))
}

fn split_counts(split: &SplitAssignment, bursts: &[Burst]) -> String {
    Split::ALL
        .iter()
        .map(|&s| format!("{s}={}/{}", split.bursts_in(s).count(), split.images_in(s, bursts).len()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn run_experiment(
    ctx: &ExperimentContext,
    id: &ExperimentId,
    overrides: ExperimentOverrides,
) -> Result<ExperimentRun, EvaluationError> {
    let suite = &ctx.suite;
    let id = &match id {
        ExperimentId::T2Holdout(c) => ExperimentId::T2Holdout(ctx.resolve_camera(c)?),
        other => other.clone(),
    };
    let spec = ExperimentSpec::for_id(id);
    let seed = overrides.seed.unwrap_or(suite.seed);
    let taxonomy = ctx.registry.get(&spec.taxonomy)?.clone();
    let projection = ctx.registry.projection("five_class", &taxonomy.name)?;

    let split = match &spec.holdout {
        None => burst_split(&ctx.bursts, suite.split_fractions, seed)?,
        Some(cam) => camera_holdout_split(&ctx.bursts, cam, suite.holdout_fractions, seed)?,
    };

    // Training material the variant would be built from: projected box labels
    // on train images plus sampled background boxes.
    let train_ids = split.images_in(Split::Train, &ctx.bursts);
    let train_ann = &ctx.annotations[&spec.label_set];
    let mut train_boxes: BTreeMap<String, usize> = taxonomy.classes.iter().map(|c| (c.clone(), 0)).collect();
    let mut background_boxes = 0;
    for id in &train_ids {
        let img = ctx.catalog.get(id).expect("burst images come from the catalog");
        let Some(ann) = train_ann.get(*id) else { continue };
        for b in &to_base_vocabulary(ann, img).boxes {
            if let Some(Some(l)) = projection.get(&b.label) {
                *train_boxes.get_mut(l).expect("projected label") += 1;
            }
        }
        let gt: Vec<_> = ann.boxes.iter().map(|b| b.bbox).collect();
        background_boxes += sample_background_boxes(
            img,
            &gt,
            suite.background_boxes_per_image,
            DEFAULT_BACKGROUND_SIZE_RANGE,
            seed,
            DEFAULT_RETRY_BUDGET,
        )?
        .boxes
        .len();
    }

    let (eval_catalog, eval_ann) = match spec.eval_set {
        EvalSet::CaptivityTest => {
            let test = split.images_in(Split::Test, &ctx.bursts);
            (ctx.catalog.filtered(|i| test.contains(i.image_id.as_str())), train_ann)
        }
        EvalSet::Wild => (ctx.catalog.filtered(|i| i.source == ImageSource::Wild), &ctx.annotations[&LabelSet::Wild]),
    };
    let mut ground_truth = Vec::with_capacity(eval_catalog.len());
    let mut missing = Vec::new();
    for img in eval_catalog.images() {
        match eval_ann.get(&img.image_id) {
            Some(a) => ground_truth.push((img.image_id.clone(), ground_truth_label(a, img, &projection, &taxonomy)?)),
            None => missing.push(img.image_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(EvaluationError::MissingAnnotations(missing));
    }
    ground_truth.sort();

    let models = if spec.single_model() { &suite.models[..1] } else { &suite.models[..] };
    let mut config = PipelineConfig::new(suite.detector.clone());
    config.seed = seed;
    config.workers = overrides.workers.unwrap_or(suite.workers);
    config.taxonomy = spec.taxonomy.clone();
    config.taxonomy_files = suite.taxonomy_files.clone();
    config.vote_method = spec.vote_method;
    config.aggregation = spec.aggregation;
    config.segmentation = spec.segmentation;
    config.min_confidence = suite.min_confidence;
    config.crop_pad = suite.crop_pad;
    config.fill = suite.fill;
    config.pixel_source = suite.pixel_source;
    config.segmenter = suite.segmenter.clone();
    config.local_models = if spec.use_local { models.to_vec() } else { Vec::new() };
    config.global_models = if spec.use_global { models.to_vec() } else { Vec::new() };
    config.base_dir = suite.base_dir.clone();

    let run = run_pipeline(&eval_catalog, &config, &ctx.registry)?;
    let ok_ids: BTreeSet<&str> = run.outcomes.iter().map(|o| o.image_id.as_str()).collect();
    let scored_truth: Vec<(String, String)> =
        ground_truth.iter().filter(|(i, _)| ok_ids.contains(i.as_str())).cloned().collect();
    let predictions: Vec<_> = run.results().cloned().collect();
    let mut report = evaluate(&predictions, &scored_truth, &taxonomy)?;

    let discard: BTreeSet<String> = match &suite.auto_discard {
        Some(l) => l.iter().filter(|x| taxonomy.contains(x)).cloned().collect(),
        None => [taxonomy.fallback_label().to_owned()].into(),
    };
    report.review_savings_minutes = Some(estimate_review_savings(run.results(), &discard, suite.review_rate_per_minute)?);

    let strategy = match &spec.holdout {
        None => format!(
            "burst_based({},{},{})",
            suite.split_fractions[0], suite.split_fractions[1], suite.split_fractions[2]
        ),
        Some(c) => format!("camera_holdout({c})"),
    };
    let dropped = taxonomy.dropped_labels();
    let ids = |v: &[SlotDescriptor]| v.iter().map(|m| m.id.as_str()).collect::<Vec<_>>().join(",");
    let meta = &mut report.metadata;
    let mut put = |k: &str, v: String| {
        meta.insert(k.to_owned(), v);
    };
    put("experiment", id.to_string());
    put("description", spec.description.clone());
    put("split_strategy", strategy);
    put("split_counts", split_counts(&split, &ctx.bursts));
    put("label_set", spec.label_set.to_string());
    put("taxonomy", taxonomy.name.clone());
    put("classes", taxonomy.len().to_string());
    put("segmentation", if spec.segmentation { "on" } else { "off" }.into());
    put("dropped_classes", if dropped.is_empty() { "none".into() } else { dropped.join(",") });
    put("vote_method", spec.vote_method.to_string());
    put("aggregation", spec.aggregation.to_string());
    put("local_models", if config.local_models.is_empty() { "none".into() } else { ids(&config.local_models) });
    put("global_models", if config.global_models.is_empty() { "none".into() } else { ids(&config.global_models) });
    put("eval_set", spec.eval_set.as_str().into());
    put(
        "train_boxes",
        train_boxes.iter().map(|(k, v)| format!("{k}={v}")).chain([format!("sampled_background={background_boxes}")]).collect::<Vec<_>>().join(" "),
    );
    put("seed", seed.to_string());
    put("pipeline_config_hash", run.record.config_hash.clone());
    put("failed_images", run.record.n_failed.to_string());
    put("run_status", run.record.status.to_string());
    put("auto_discard", discard.iter().cloned().collect::<Vec<_>>().join(","));

    Ok(ExperimentRun { spec, split, pipeline_config: config, run, report, ground_truth: scored_truth })
}
