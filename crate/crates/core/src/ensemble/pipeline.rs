use std::fmt;
use std::path::Path;

use image::imageops;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate_image_label, vote, AggregateOptions, EnsembleError, PipelineConfig, Vote, VoteResult};
use crate::catalog::{CameraTrapImage, Catalog};
use crate::curation::crop_rect;
use crate::pixels::{pixel_source, PixelSource};
use crate::stages::{
    build_classifier, build_detector, build_segmenter, classify, composite_mask, detect_regions, letterbox, Classifier,
    ClassifierInput, Detector, FrameInput, ProjectingClassifier, RegionProposal, Scale, SegmentInput, Segmenter,
    StageError,
};
use crate::taxonomy::{ClassTaxonomy, TaxonomyRegistry};

/// Everything the pipeline produced for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_id: String,
    /// Proposals that passed the confidence threshold, in classification
    /// order; `box_index` in local votes indexes this list.
    pub proposals: Vec<RegionProposal>,
    pub box_labels: Vec<String>,
    pub result: VoteResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendVersion {
    pub slot: String,
    pub id: String,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    FailuresOverThreshold,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::FailuresOverThreshold => "failures_over_threshold",
        })
    }
}

/// Machine-readable summary accompanying a run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub taxonomy: String,
    pub vote_method: String,
    pub aggregation: String,
    pub segmentation: bool,
    pub global_fallback: bool,
    pub min_confidence: f64,
    pub backends: Vec<BackendVersion>,
    pub n_images: usize,
    pub n_failed: usize,
    pub max_failure_fraction: f64,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub record: RunRecord,
    /// Sorted by image id.
    pub outcomes: Vec<ImageOutcome>,
    /// Sorted by image id.
    pub failures: Vec<ImageFailure>,
}

impl RunOutput {
    pub fn results(&self) -> impl Iterator<Item = &VoteResult> {
        self.outcomes.iter().map(|o| &o.result)
    }

    pub fn succeeded(&self) -> bool {
        self.record.status == RunStatus::Ok
    }

    /// One outcome per line, then one failure per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            out.push_str(&serde_json::to_string(o).expect("outcome serializes"));
            out.push('\n');
        }
        for f in &self.failures {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "failure": f })).expect("failure serializes"));
            out.push('\n');
        }
        out
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    taxonomy: ClassTaxonomy,
    detector: Box<dyn Detector>,
    segmenter: Option<Box<dyn Segmenter>>,
    locals: Vec<Box<dyn Classifier>>,
    globals: Vec<Box<dyn Classifier>>,
    pixels: Option<Box<dyn PixelSource>>,
}

fn wrap_classifier(
    c: Box<dyn Classifier>,
    registry: &TaxonomyRegistry,
    taxonomy: &ClassTaxonomy,
) -> Result<Box<dyn Classifier>, StageError> {
    match c.declared_labels() {
        Some(labels) if labels != taxonomy.classes => Ok(Box::new(ProjectingClassifier::new(c, registry, taxonomy)?)),
        _ => Ok(c),
    }
}

impl Pipeline {
    /// Instantiates every configured backend. Classifiers whose declared
    /// labels form a finer taxonomy are projected onto the run's taxonomy.
    pub fn build(config: &PipelineConfig, registry: &TaxonomyRegistry) -> Result<Self, EnsembleError> {
        config.validate()?;
        let mut registry = registry.clone();
        for f in &config.taxonomy_files {
            registry.load_file(&config.base_dir.join(f))?;
        }
        let taxonomy = registry.get(&config.taxonomy)?.clone();
        let base = config.base_dir.as_path();
        let detector = build_detector(&config.detector_descriptor(), base)?;
        let segmenter = match config.segmenter_descriptor() {
            Some(d) if config.segmentation => Some(build_segmenter(&d, base)?),
            _ => None,
        };
        let models = |slots: &[super::SlotDescriptor]| -> Result<Vec<Box<dyn Classifier>>, EnsembleError> {
            slots
                .iter()
                .map(|s| {
                    let c = build_classifier(&s.descriptor(crate::stages::BackendRole::Classifier), base)?;
                    Ok(wrap_classifier(c, &registry, &taxonomy)?)
                })
                .collect()
        };
        let locals = models(&config.local_models)?;
        let globals = models(&config.global_models)?;
        let p = Self { config: config.clone(), taxonomy, detector, segmenter, locals, globals, pixels: None };
        if p.needs_pixels() && config.pixel_source == crate::pixels::PixelSourceKind::None {
            return Err(EnsembleError::Config(
                "configured backends need pixels but pixel_source = \"none\"".into(),
            ));
        }
        Ok(p)
    }

    /// Assembles a pipeline from ready-made backends.
    pub fn from_parts(
        config: PipelineConfig,
        taxonomy: ClassTaxonomy,
        detector: Box<dyn Detector>,
        segmenter: Option<Box<dyn Segmenter>>,
        locals: Vec<Box<dyn Classifier>>,
        globals: Vec<Box<dyn Classifier>>,
    ) -> Self {
        Self { config, taxonomy, detector, segmenter, locals, globals, pixels: None }
    }

    /// Replaces the configured pixel source.
    pub fn with_pixel_source(mut self, source: Box<dyn PixelSource>) -> Self {
        self.pixels = Some(source);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &ClassTaxonomy {
        &self.taxonomy
    }

    fn needs_pixels(&self) -> bool {
        self.detector.needs_pixels()
            || (self.config.segmentation && self.segmenter.as_ref().is_some_and(|s| s.needs_pixels()))
            || self.locals.iter().chain(&self.globals).any(|c| c.needs_pixels())
    }

    pub fn backend_versions(&self) -> Vec<BackendVersion> {
        let mut out = vec![BackendVersion {
            slot: "detector".into(),
            id: self.detector.id().to_owned(),
            version: self.detector.version(),
        }];
        if let Some(s) = &self.segmenter {
            out.push(BackendVersion { slot: "segmenter".into(), id: s.id().to_owned(), version: s.version() });
        }
        for (slot, models) in [("local", &self.locals), ("global", &self.globals)] {
            for m in models.iter() {
                out.push(BackendVersion { slot: slot.into(), id: m.id().to_owned(), version: m.version() });
            }
        }
        out
    }

    pub fn run(&self, catalog: &Catalog) -> Result<RunOutput, EnsembleError> {
        let owned;
        let source: &dyn PixelSource = match &self.pixels {
            Some(p) => p.as_ref(),
            None => {
                owned = pixel_source(self.config.pixel_source, catalog.root().to_path_buf());
                owned.as_ref()
            }
        };
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| EnsembleError::Config(format!("cannot start {} workers: {e}", self.config.workers)))?;
        let per_image: Vec<Result<ImageOutcome, ImageFailure>> = threads.install(|| {
            catalog
                .images()
                .par_iter()
                .map(|img| self.process_image(img, &catalog.resolve_file(img), source))
                .collect()
        });

        let mut outcomes = Vec::with_capacity(per_image.len());
        let mut failures = Vec::new();
        for r in per_image {
            match r {
                Ok(o) => outcomes.push(o),
                Err(f) => failures.push(f),
            }
        }
        outcomes.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));

        let n_images = catalog.len();
        let over = n_images > 0 && failures.len() as f64 > self.config.max_failure_fraction * n_images as f64;
        let c = &self.config;
        let record = RunRecord {
            config_hash: c.config_hash(),
            seed: c.seed,
            taxonomy: self.taxonomy.name.clone(),
            vote_method: c.vote_method.to_string(),
            aggregation: c.aggregation.to_string(),
            segmentation: c.segmentation,
            global_fallback: c.global_fallback,
            min_confidence: c.min_confidence,
            backends: self.backend_versions(),
            n_images,
            n_failed: failures.len(),
            max_failure_fraction: c.max_failure_fraction,
            status: if over { RunStatus::FailuresOverThreshold } else { RunStatus::Ok },
        };
        Ok(RunOutput { record, outcomes, failures })
    }

    fn classify_all(
        &self,
        models: &[Box<dyn Classifier>],
        image_id: &str,
        scale: Scale,
        masked: bool,
        pixels: Option<&image::RgbImage>,
    ) -> Result<Vec<Vote>, StageError> {
        models
            .iter()
            .map(|m| {
                let input = ClassifierInput { image_id, scale, masked, pixels };
                let scores = classify(m.as_ref(), &input, &self.taxonomy)?;
                Ok(Vote::new(m.id(), scale, scores, &self.taxonomy))
            })
            .collect()
    }

    /// The crop fed to local models for proposal `box_index` and, when a
    /// segmenter is configured, the same crop after mask compositing.
    pub fn box_artifacts(
        &self,
        img: &CameraTrapImage,
        frame: &image::RgbImage,
        proposal: &RegionProposal,
        box_index: usize,
    ) -> Result<(image::RgbImage, Option<image::RgbImage>), StageError> {
        let c = &self.config;
        let rect = crop_rect(&proposal.bbox, img.width_px, img.height_px, c.crop_pad)
            .map_err(|e| StageError::Config(e.to_string()))?;
        let crop = imageops::crop_imm(frame, rect.x0, rect.y0, rect.width(), rect.height()).to_image();
        let masked = match &self.segmenter {
            Some(seg) => {
                let mask = seg.segment(&SegmentInput { image: img, box_index, rect, crop: Some(&crop) })?;
                Some(composite_mask(&crop, &mask, c.fill)?)
            }
            None => None,
        };
        Ok((crop, masked))
    }

    /// detect → per box: crop → optional mask → local classifiers → box vote;
    /// optional global classifiers → global vote; then aggregate.
    pub fn process_image(
        &self,
        img: &CameraTrapImage,
        file: &Path,
        source: &dyn PixelSource,
    ) -> Result<ImageOutcome, ImageFailure> {
        let fail = |stage: &str, e: &dyn fmt::Display| ImageFailure {
            image_id: img.image_id.clone(),
            stage: stage.to_owned(),
            error: e.to_string(),
        };
        let c = &self.config;
        let frame = if self.needs_pixels() { source.load(img).map_err(|e| fail("load", &e))? } else { None };

        let input = FrameInput { image: img, pixels: frame.as_ref(), file: Some(file) };
        let proposals = detect_regions(self.detector.as_ref(), &input, c.min_confidence).map_err(|e| fail("detect", &e))?;

        let mut box_results = Vec::with_capacity(proposals.len());
        for (i, p) in proposals.iter().enumerate() {
            let rect = crop_rect(&p.bbox, img.width_px, img.height_px, c.crop_pad).map_err(|e| fail("crop", &e))?;
            let mut crop = frame.as_ref().map(|f| imageops::crop_imm(f, rect.x0, rect.y0, rect.width(), rect.height()).to_image());
            if c.segmentation {
                let seg = self.segmenter.as_ref().expect("validated: segmentation needs a segmenter");
                let mask = seg
                    .segment(&SegmentInput { image: img, box_index: i, rect, crop: crop.as_ref() })
                    .map_err(|e| fail("segment", &e))?;
                if (mask.width(), mask.height()) != (rect.width(), rect.height()) {
                    let e = StageError::MaskDimensions {
                        mask_w: mask.width(),
                        mask_h: mask.height(),
                        crop_w: rect.width(),
                        crop_h: rect.height(),
                    };
                    return Err(fail("segment", &e));
                }
                if let Some(cr) = &crop {
                    crop = Some(composite_mask(cr, &mask, c.fill).map_err(|e| fail("segment", &e))?);
                }
            }
            let model_input = crop.as_ref().map(|cr| letterbox(cr, c.input_size, c.fill));
            let votes = self
                .classify_all(&self.locals, &img.image_id, Scale::Local { box_index: i }, c.segmentation, model_input.as_ref())
                .map_err(|e| fail("classify", &e))?;
            if !votes.is_empty() {
                box_results.push(vote(c.vote_method, &img.image_id, &votes, &self.taxonomy).map_err(|e| fail("vote", &e))?);
            }
        }

        let global_result = if self.globals.is_empty() {
            None
        } else {
            let whole = frame.as_ref().map(|f| letterbox(f, c.input_size, c.fill));
            let votes = self
                .classify_all(&self.globals, &img.image_id, Scale::Global, false, whole.as_ref())
                .map_err(|e| fail("classify", &e))?;
            Some(vote(c.vote_method, &img.image_id, &votes, &self.taxonomy).map_err(|e| fail("vote", &e))?)
        };

        let opts = AggregateOptions { policy: c.aggregation, method: c.vote_method, global_fallback: c.global_fallback };
        let result = aggregate_image_label(&img.image_id, &box_results, global_result.as_ref(), opts, &self.taxonomy)
            .map_err(|e| fail("aggregate", &e))?;
        Ok(ImageOutcome {
            image_id: img.image_id.clone(),
            proposals,
            box_labels: box_results.into_iter().map(|r| r.final_label).collect(),
            result,
        })
    }
}

pub fn run_pipeline(catalog: &Catalog, config: &PipelineConfig, registry: &TaxonomyRegistry) -> Result<RunOutput, EnsembleError> {
    Pipeline::build(config, registry)?.run(catalog)
}

/// Re-derives an image label from the votes stored in `outcome`, as the
/// pipeline would have with the given threshold and voting options. Only
/// proposals at or above `min_confidence` keep their votes; nothing is
/// re-scored, so thresholds below the original run's cannot be honoured.
pub fn revote_outcome(
    outcome: &ImageOutcome,
    min_confidence: f64,
    opts: AggregateOptions,
    taxonomy: &ClassTaxonomy,
) -> Result<VoteResult, EnsembleError> {
    let id = outcome.image_id.as_str();
    let mut box_results = Vec::new();
    for (i, p) in outcome.proposals.iter().enumerate() {
        if p.confidence < min_confidence {
            continue;
        }
        let votes: Vec<Vote> =
            outcome.result.votes.iter().filter(|v| v.scale == Scale::Local { box_index: i }).cloned().collect();
        if !votes.is_empty() {
            box_results.push(vote(opts.method, id, &votes, taxonomy)?);
        }
    }
    let global: Vec<Vote> = outcome.result.votes.iter().filter(|v| v.scale == Scale::Global).cloned().collect();
    let global_result = if global.is_empty() { None } else { Some(vote(opts.method, id, &global, taxonomy)?) };
    aggregate_image_label(id, &box_results, global_result.as_ref(), opts, taxonomy)
}
