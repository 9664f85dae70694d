use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use trapsift_core::catalog::{group_bursts, ingest_manifest, parse_box_annotations, Annotation, IngestOptions};
use trapsift_core::curation::{burst_split, camera_holdout_split, sample_background_boxes, to_base_vocabulary, DEFAULT_RETRY_BUDGET};
use trapsift_core::ensemble::{
    revote_outcome, AggregateOptions, ImageOutcome, Pipeline, PipelineConfig, RunRecord, RunStatus,
};
use trapsift_core::evaluation::{
    estimate_review_savings, evaluate, experiment_record, ground_truth_label, run_experiment, write_reports,
    EvaluationReport, ExperimentContext, ExperimentId, ExperimentOverrides,
};
use trapsift_core::{BoundingBox, BurstPolicy, Catalog, ImageSource, LabelSet, TaxonomyRegistry};
use trapsift_service::{export_ndjson, export_voc, AppState, MovedImage, RunStore, WhatifSummary};

use crate::{
    AnnotationArgs, Command, EvaluateArgs, ExperimentArgs, ExportArgs, IngestArgs, ManifestArgs, RemapArgs, RunArgs,
    SampleBgArgs, ServeArgs, SplitArgs, StageFailure, WhatifArgs,
};

pub(crate) fn dispatch(command: Command, dry_run: bool) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a, dry_run),
        Command::Split(a) => split(a, dry_run),
        Command::SampleBg(a) => sample_bg(a, dry_run),
        Command::Remap(a) => remap(a, dry_run),
        Command::Run(a) => run(a, dry_run),
        Command::Experiment(a) => experiment(a, dry_run),
        Command::Evaluate(a) => evaluate_run(a, dry_run),
        Command::Whatif(a) => whatif(a, dry_run),
        Command::Serve(a) => serve(a, dry_run),
        Command::Export(a) => export(a, dry_run),
    }
}

/// Prints `settings` as TOML on standard output.
fn print_effective<T: Serialize>(settings: &T) -> Result<()> {
    print!("{}", toml::to_string_pretty(settings).context("rendering effective settings")?);
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} {} is not a directory", path.display());
    }
    Ok(())
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    tracing::info!(path = %path.display(), "wrote");
    Ok(())
}

fn ndjson<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn load_catalog(m: &ManifestArgs) -> Result<Catalog> {
    require_file(&m.manifest, "manifest")?;
    Ok(ingest_manifest(&m.manifest, IngestOptions { no_pixels: m.no_pixels })?)
}

fn source_of(set: LabelSet) -> ImageSource {
    match set {
        LabelSet::Set1 | LabelSet::Set2 => ImageSource::Captivity,
        LabelSet::Wild => ImageSource::Wild,
    }
}

/// Annotations for the catalog images of the label set's source. Images
/// without a document are skipped with a warning.
fn load_annotations(catalog: &Catalog, a: &AnnotationArgs) -> Result<BTreeMap<String, Annotation>> {
    require_dir(&a.annotations, "annotation directory")?;
    let mut out = BTreeMap::new();
    for img in catalog.images().iter().filter(|i| i.source == source_of(a.label_set)) {
        let path = a.annotations.join(format!("{}.xml", img.image_id));
        if !path.is_file() {
            tracing::warn!(image_id = %img.image_id, "no annotation document");
            continue;
        }
        let parsed = parse_box_annotations(&path, img, a.label_set)?;
        for w in &parsed.warnings {
            tracing::warn!(image_id = %w.image_id, object = w.object_index, "{}", w.message);
        }
        out.insert(img.image_id.clone(), parsed.annotation);
    }
    Ok(out)
}

fn registry_with(files: &[PathBuf]) -> Result<TaxonomyRegistry> {
    let mut registry = TaxonomyRegistry::builtin();
    for f in files {
        require_file(f, "taxonomy file")?;
        registry.load_file(f)?;
    }
    Ok(registry)
}

#[derive(Serialize)]
struct EffectiveIngest<'a> {
    manifest: &'a Path,
    no_pixels: bool,
    burst_policy: BurstPolicy,
    out: &'a Path,
}

fn ingest(a: IngestArgs, dry_run: bool) -> Result<()> {
    let settings = EffectiveIngest {
        manifest: &a.manifest.manifest,
        no_pixels: a.manifest.no_pixels,
        burst_policy: BurstPolicy::Gap { max_gap_secs: a.burst_gap_secs },
        out: &a.out,
    };
    if dry_run {
        return print_effective(&settings);
    }
    let catalog = load_catalog(&a.manifest)?;
    let timed: Vec<_> = catalog.images().iter().filter(|i| i.captured_at.is_some()).cloned().collect();
    let bursts = group_bursts(&timed, &settings.burst_policy)?;
    write_out(&a.out, "catalog.ndjson", &catalog.to_ndjson())?;
    write_out(&a.out, "bursts.ndjson", &ndjson(&bursts))?;
    tracing::info!(images = catalog.len(), bursts = bursts.len(), "ingested");
    Ok(())
}

#[derive(Serialize)]
struct EffectiveSplit<'a> {
    manifest: &'a Path,
    seed: u64,
    fractions: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    holdout: Option<&'a str>,
    holdout_fractions: [f64; 2],
    source: &'a str,
    burst_policy: BurstPolicy,
    out: &'a Path,
}

fn parse_source(s: &str) -> Result<ImageSource> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .with_context(|| format!("unknown image source {s:?}"))
}

fn split(a: SplitArgs, dry_run: bool) -> Result<()> {
    let [train, val, _] = a.fractions;
    if a.holdout.is_some() && train + val <= 0.0 {
        bail!("camera hold-out needs a positive train+val fraction");
    }
    let settings = EffectiveSplit {
        manifest: &a.manifest.manifest,
        seed: a.seed,
        fractions: a.fractions,
        holdout: a.holdout.as_deref(),
        holdout_fractions: [train / (train + val), val / (train + val)],
        source: &a.source,
        burst_policy: BurstPolicy::Gap { max_gap_secs: a.burst_gap_secs },
        out: &a.out,
    };
    if dry_run {
        return print_effective(&settings);
    }
    let source = parse_source(&a.source)?;
    let catalog = load_catalog(&a.manifest)?;
    let images: Vec<_> = catalog.images().iter().filter(|i| i.source == source).cloned().collect();
    let bursts = group_bursts(&images, &settings.burst_policy)?;
    let assignment = match &a.holdout {
        None => burst_split(&bursts, a.fractions, a.seed)?,
        Some(cam) => {
            let cams: BTreeSet<&str> = bursts.iter().map(|b| b.camera_id.as_str()).collect();
            let cam = match cam.parse::<usize>() {
                Ok(n) if !cams.contains(cam.as_str()) && (1..=cams.len()).contains(&n) => {
                    cams.iter().nth(n - 1).expect("index checked").to_string()
                }
                _ => cam.clone(),
            };
            camera_holdout_split(&bursts, &cam, settings.holdout_fractions, a.seed)?
        }
    };
    write_out(&a.out, "split.txt", &assignment.to_lines())?;
    write_out(&a.out, "bursts.ndjson", &ndjson(&bursts))?;
    Ok(())
}

#[derive(Serialize)]
struct EffectiveSampleBg<'a> {
    manifest: &'a Path,
    annotations: &'a Path,
    label_set: String,
    seed: u64,
    per_image: usize,
    size_range: (f64, f64),
    retry_budget: usize,
    out: &'a Path,
}

fn sample_bg(a: SampleBgArgs, dry_run: bool) -> Result<()> {
    let settings = EffectiveSampleBg {
        manifest: &a.manifest.manifest,
        annotations: &a.annotations.annotations,
        label_set: a.annotations.label_set.to_string(),
        seed: a.seed,
        per_image: a.per_image,
        size_range: a.size_range,
        retry_budget: DEFAULT_RETRY_BUDGET,
        out: &a.out,
    };
    if dry_run {
        return print_effective(&settings);
    }
    let catalog = load_catalog(&a.manifest)?;
    let annotations = load_annotations(&catalog, &a.annotations)?;
    let mut samples = Vec::with_capacity(annotations.len());
    for (id, ann) in &annotations {
        let img = catalog.get(id).expect("annotations are keyed by catalog ids");
        let gt: Vec<BoundingBox> = ann.boxes.iter().map(|b| b.bbox).collect();
        let s = sample_background_boxes(img, &gt, a.per_image, a.size_range, a.seed, DEFAULT_RETRY_BUDGET)?;
        if let Some(why) = &s.exhausted {
            tracing::warn!(image_id = %id, "{why}");
        }
        samples.push(s);
    }
    write_out(&a.out, "background.ndjson", &ndjson(&samples))
}

#[derive(Serialize)]
struct EffectiveRemap<'a> {
    manifest: &'a Path,
    annotations: &'a Path,
    label_set: String,
    taxonomy: &'a str,
    taxonomy_files: &'a [PathBuf],
    out: &'a Path,
}

#[derive(Serialize)]
struct RemappedBox {
    bbox: BoundingBox,
    label: String,
}

#[derive(Serialize)]
struct Remapped {
    image_id: String,
    taxonomy: String,
    image_label: String,
    boxes: Vec<RemappedBox>,
}

fn remap(a: RemapArgs, dry_run: bool) -> Result<()> {
    let settings = EffectiveRemap {
        manifest: &a.manifest.manifest,
        annotations: &a.annotations.annotations,
        label_set: a.annotations.label_set.to_string(),
        taxonomy: &a.taxonomy,
        taxonomy_files: &a.taxonomy_files,
        out: &a.out,
    };
    if dry_run {
        return print_effective(&settings);
    }
    let registry = registry_with(&a.taxonomy_files)?;
    let taxonomy = registry.get(&a.taxonomy)?.clone();
    let projection = registry.projection("five_class", &taxonomy.name)?;
    let catalog = load_catalog(&a.manifest)?;
    let annotations = load_annotations(&catalog, &a.annotations)?;
    let mut out = Vec::with_capacity(annotations.len());
    for (id, ann) in &annotations {
        let img = catalog.get(id).expect("annotations are keyed by catalog ids");
        let boxes = to_base_vocabulary(ann, img)
            .boxes
            .into_iter()
            .filter_map(|b| match projection.get(&b.label) {
                Some(Some(l)) => Some(RemappedBox { bbox: b.bbox, label: l.clone() }),
                _ => None,
            })
            .collect();
        out.push(Remapped {
            image_id: id.clone(),
            taxonomy: taxonomy.name.clone(),
            image_label: ground_truth_label(ann, img, &projection, &taxonomy)?,
            boxes,
        });
    }
    write_out(&a.out, "remapped.ndjson", &ndjson(&out))
}

fn effective_pipeline_config(a: &RunArgs) -> Result<PipelineConfig> {
    require_file(&a.config, "pipeline config")?;
    let mut c = PipelineConfig::load(&a.config)?;
    if let Some(w) = a.workers {
        c.workers = w;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(t) = &a.taxonomy {
        c.taxonomy = t.clone();
    }
    if let Some(m) = a.vote_method {
        c.vote_method = m;
    }
    if let Some(p) = a.aggregation {
        c.aggregation = p;
    }
    if let Some(s) = a.segmentation {
        c.segmentation = s;
    }
    if let Some(m) = a.min_confidence {
        c.min_confidence = m;
    }
    c.validate()?;
    Ok(c)
}

fn run(a: RunArgs, dry_run: bool) -> Result<()> {
    let config = effective_pipeline_config(&a)?;
    if dry_run {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let catalog = load_catalog(&a.manifest)?;
    let mut registry = TaxonomyRegistry::builtin();
    for f in &config.taxonomy_files {
        registry.load_file(&config.base_dir.join(f))?;
    }
    let output = Pipeline::build(&config, &registry)?.run(&catalog)?;
    write_out(&a.out, "results.ndjson", &output.to_ndjson())?;
    write_out(&a.out, "run.json", &pretty(&output.record))?;
    tracing::info!(images = output.record.n_images, failed = output.record.n_failed, "run finished");
    if output.record.status == RunStatus::FailuresOverThreshold {
        return Err(StageFailure(format!(
            "{} of {} images failed, above the allowed fraction {}",
            output.record.n_failed, output.record.n_images, output.record.max_failure_fraction
        ))
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct EffectiveExperiment<'a> {
    experiments: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    workers_override: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed_override: Option<u64>,
    out: &'a Path,
    suite: &'a trapsift_core::evaluation::ExperimentSuite,
}

fn experiment_ids(ctx: &ExperimentContext, raw: &[String]) -> Result<Vec<ExperimentId>> {
    let mut ids = Vec::new();
    for r in raw.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        if r == "all" {
            ids.extend(ExperimentId::grid(&ctx.captivity_cameras()));
        } else {
            ids.push(r.parse::<ExperimentId>()?);
        }
    }
    Ok(ids)
}

fn experiment(a: ExperimentArgs, dry_run: bool) -> Result<()> {
    require_file(&a.suite, "suite file")?;
    let ctx = ExperimentContext::load(&a.suite)?;
    let ids = experiment_ids(&ctx, &a.ids)?;
    if dry_run {
        return print_effective(&EffectiveExperiment {
            experiments: ids.iter().map(ToString::to_string).collect(),
            workers_override: a.workers,
            seed_override: a.seed,
            out: &a.out,
            suite: &ctx.suite,
        });
    }
    let overrides = ExperimentOverrides { workers: a.workers, seed: a.seed };
    let mut records = Vec::with_capacity(ids.len());
    let mut over_threshold = Vec::new();
    for id in &ids {
        tracing::info!(experiment = %id, "running");
        let run = run_experiment(&ctx, id, overrides)?;
        if run.run.record.status == RunStatus::FailuresOverThreshold {
            over_threshold.push(run.spec.id.to_string());
        }
        records.push(experiment_record(&run));
    }
    write_reports(&a.out, &records)?;
    if !over_threshold.is_empty() {
        return Err(StageFailure(format!("stage failures over threshold in {}", over_threshold.join(", "))).into());
    }
    Ok(())
}

/// Outcomes and record of a directory written by `run`.
fn load_run_dir(dir: &Path) -> Result<(RunRecord, Vec<ImageOutcome>)> {
    require_dir(dir, "run directory")?;
    let record_path = dir.join("run.json");
    let record: RunRecord = serde_json::from_str(
        &fs::read_to_string(&record_path).with_context(|| format!("reading {}", record_path.display()))?,
    )
    .with_context(|| format!("parsing {}", record_path.display()))?;
    let results_path = dir.join("results.ndjson");
    let text = fs::read_to_string(&results_path).with_context(|| format!("reading {}", results_path.display()))?;
    let mut outcomes = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{} line {}", results_path.display(), i + 1))?;
        if v.get("failure").is_some() {
            continue;
        }
        outcomes.push(
            serde_json::from_value(v).with_context(|| format!("{} line {}", results_path.display(), i + 1))?,
        );
    }
    Ok((record, outcomes))
}

#[derive(Serialize)]
struct EffectiveEvaluate<'a> {
    run: &'a Path,
    manifest: &'a Path,
    annotations: &'a Path,
    label_set: String,
    taxonomy_files: &'a [PathBuf],
    review_rate_per_minute: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    auto_discard: Vec<String>,
    out: &'a Path,
}

#[derive(Serialize)]
struct EvaluationOutput {
    report: EvaluationReport,
    auto_discard: Vec<String>,
    review_rate_per_minute: f64,
    review_minutes_saved: f64,
}

fn evaluate_run(a: EvaluateArgs, dry_run: bool) -> Result<()> {
    let settings = EffectiveEvaluate {
        run: &a.run,
        manifest: &a.manifest.manifest,
        annotations: &a.annotations.annotations,
        label_set: a.annotations.label_set.to_string(),
        taxonomy_files: &a.taxonomy_files,
        review_rate_per_minute: a.review_rate,
        auto_discard: a.auto_discard.clone(),
        out: &a.out,
    };
    if dry_run {
        return print_effective(&settings);
    }
    let (record, outcomes) = load_run_dir(&a.run)?;
    let registry = registry_with(&a.taxonomy_files)?;
    let taxonomy = registry.get(&record.taxonomy)?.clone();
    let projection = registry.projection("five_class", &taxonomy.name)?;
    let catalog = load_catalog(&a.manifest)?;
    let annotations = load_annotations(&catalog, &a.annotations)?;

    // Only images of the label set's source are scored.
    let mut truth = Vec::with_capacity(outcomes.len());
    let mut results = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let img = catalog.get(&o.image_id).with_context(|| format!("run image {} is not in the manifest", o.image_id))?;
        if img.source != source_of(a.annotations.label_set) {
            continue;
        }
        let ann = annotations.get(&o.image_id).with_context(|| format!("no annotation for {}", o.image_id))?;
        truth.push((o.image_id.clone(), ground_truth_label(ann, img, &projection, &taxonomy)?));
        results.push(o.result.clone());
    }
    if results.is_empty() {
        bail!("the run has no {} images to score", a.annotations.label_set);
    }
    let mut report = evaluate(&results, &truth, &taxonomy)?;
    report.metadata.insert("taxonomy".into(), taxonomy.name.clone());
    report.metadata.insert("config_hash".into(), record.config_hash.clone());
    report.metadata.insert("label_set".into(), a.annotations.label_set.to_string());

    let discard: BTreeSet<String> = if a.auto_discard.is_empty() {
        [taxonomy.fallback_label().to_owned()].into()
    } else {
        for l in &a.auto_discard {
            if !taxonomy.contains(l) {
                bail!("auto-discard label {l:?} is not a class of {}", taxonomy.name);
            }
        }
        a.auto_discard.iter().cloned().collect()
    };
    let saved = estimate_review_savings(&results, &discard, a.review_rate)?;
    write_out(
        &a.out,
        "evaluation.json",
        &pretty(&EvaluationOutput {
            report,
            auto_discard: discard.into_iter().collect(),
            review_rate_per_minute: a.review_rate,
            review_minutes_saved: saved,
        }),
    )
}

#[derive(Serialize)]
struct EffectiveWhatif<'a> {
    run: &'a Path,
    taxonomy_files: &'a [PathBuf],
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_conf: Option<f64>,
    out: &'a Path,
}

fn whatif(a: WhatifArgs, dry_run: bool) -> Result<()> {
    if dry_run {
        return print_effective(&EffectiveWhatif {
            run: &a.run,
            taxonomy_files: &a.taxonomy_files,
            method: a.method.map(|m| m.as_str().to_owned()),
            aggregation: a.aggregation.map(|p| p.as_str().to_owned()),
            min_conf: a.min_conf,
            out: &a.out,
        });
    }
    let (record, outcomes) = load_run_dir(&a.run)?;
    let registry = registry_with(&a.taxonomy_files)?;
    let taxonomy = registry.get(&record.taxonomy)?.clone();
    let min_conf = a.min_conf.unwrap_or(record.min_confidence);
    if !(0.0..=1.0).contains(&min_conf) {
        bail!("min-conf {min_conf} outside [0, 1]");
    }
    if min_conf < record.min_confidence {
        bail!(
            "min-conf {min_conf} is below the run's detection threshold {}; proposals under it were never scored",
            record.min_confidence
        );
    }
    let opts = AggregateOptions {
        policy: a.aggregation.map_or_else(|| record.aggregation.parse(), Ok).map_err(anyhow::Error::msg)?,
        method: a.method.map_or_else(|| record.vote_method.parse(), Ok).map_err(anyhow::Error::msg)?,
        global_fallback: record.global_fallback,
    };
    let zero = || taxonomy.classes.iter().map(|c| (c.clone(), 0)).collect::<BTreeMap<_, _>>();
    let (mut counts, mut baseline_counts) = (zero(), zero());
    let mut moved = Vec::new();
    for o in &outcomes {
        let r = revote_outcome(o, min_conf, opts, &taxonomy)?;
        *counts.entry(r.final_label.clone()).or_default() += 1;
        *baseline_counts.entry(o.result.final_label.clone()).or_default() += 1;
        if r.final_label != o.result.final_label {
            moved.push(MovedImage { image_id: o.image_id.clone(), from: o.result.final_label.clone(), to: r.final_label });
        }
    }
    let summary = WhatifSummary {
        run_id: record.config_hash[..16].to_owned(),
        method: opts.method,
        aggregation: opts.policy,
        min_confidence: min_conf,
        counts,
        baseline_counts,
        moved,
    };
    write_out(&a.out, "whatif.json", &pretty(&summary))
}

#[derive(Serialize)]
struct EffectiveServe<'a> {
    store: &'a Path,
    addr: String,
    token_required: bool,
}

fn serve(a: ServeArgs, dry_run: bool) -> Result<()> {
    if dry_run {
        return print_effective(&EffectiveServe {
            store: &a.store,
            addr: a.addr.to_string(),
            token_required: a.token.is_some(),
        });
    }
    let store = RunStore::open(&a.store)?;
    tracing::info!(runs = store.run_ids().len(), store = %a.store.display(), "store opened");
    let state = Arc::new(AppState { store, token: a.token });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")?;
    rt.block_on(trapsift_service::serve(state, a.addr)).with_context(|| format!("serving on {}", a.addr))?;
    Ok(())
}

#[derive(Serialize)]
struct EffectiveExport<'a> {
    store: &'a Path,
    run: &'a str,
    format: &'a str,
    out: &'a Path,
}

fn export(a: ExportArgs, dry_run: bool) -> Result<()> {
    if dry_run {
        return print_effective(&EffectiveExport { store: &a.store, run: &a.run, format: &a.format, out: &a.out });
    }
    require_dir(&a.store, "run store")?;
    let store = RunStore::open(&a.store)?;
    let run = store.get(&a.run)?;
    match a.format.as_str() {
        "ndjson" => write_out(&a.out, "decisions.ndjson", &export_ndjson(&run)),
        _ => {
            let voc = export_voc(&run);
            for f in &voc.files {
                write_out(&a.out, &f.file_name, &f.xml)?;
            }
            write_out(&a.out, "export.json", &pretty(&voc.header))
        }
    }
}
