use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use trapsift_core::catalog::{write_voc_xml, Annotation, LabelSet, LabeledBox};
use trapsift_core::ensemble::{revote_outcome, AggregateOptions, AggregationPolicy, ImageOutcome, VoteMethod};
use trapsift_core::evaluation::DEFAULT_REVIEW_RATE_PER_MINUTE;
use trapsift_core::{BoundingBox, ClassTaxonomy};

use crate::store::{DecisionRecord, RunState};
use crate::ServiceError;

/// Body of `POST /runs/{id}/decisions`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewDecision {
    pub image_id: String,
    pub reviewer: String,
    pub decided_label: String,
    /// RFC 3339; the server clock is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionAck {
    pub run_id: String,
    pub image_id: String,
    /// The active decision after this call.
    pub record: DecisionRecord,
    pub duplicate: bool,
    pub log_length: usize,
}

/// Image id → index of its active decision in `records`.
pub(crate) fn active_index(records: &[DecisionRecord]) -> BTreeMap<String, usize> {
    records.iter().enumerate().map(|(i, r)| (r.image_id.clone(), i)).collect()
}

/// Active decision per image, reconstructed from a log in append order.
pub fn replay_decisions(records: &[DecisionRecord]) -> BTreeMap<String, DecisionRecord> {
    let mut out = BTreeMap::new();
    for r in records {
        out.insert(r.image_id.clone(), r.clone());
    }
    out
}

impl RunState {
    /// Validates and logs a decision. Re-sending the active decision of the
    /// same reviewer is acknowledged as a duplicate and not logged again.
    pub fn submit_decision(&self, d: &ReviewDecision) -> Result<DecisionAck, ServiceError> {
        if self.image(&d.image_id).is_none() {
            return Err(ServiceError::UnknownImage { run_id: self.run_id().to_owned(), image_id: d.image_id.clone() });
        }
        if !self.taxonomy.contains(&d.decided_label) {
            return Err(ServiceError::InvalidLabel {
                label: d.decided_label.clone(),
                taxonomy: self.taxonomy.name.clone(),
                classes: self.taxonomy.classes.clone(),
            });
        }
        if d.reviewer.trim().is_empty() {
            return Err(ServiceError::BadRequest("reviewer must be non-empty".into()));
        }
        let decided_at = match &d.decided_at {
            Some(ts) => chrono::DateTime::parse_from_rfc3339(ts)
                .map_err(|e| ServiceError::BadRequest(format!("decided_at {ts:?}: {e}")))?
                .with_timezone(&chrono::Utc),
            None => chrono::Utc::now(),
        }
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true);

        let mut log = self.log.lock().expect("log lock");
        let previous = log.active.get(&d.image_id).map(|&i| log.records[i].clone());
        if let Some(prev) = &previous {
            let same_time = d.decided_at.is_none() || prev.decided_at == decided_at;
            if prev.reviewer == d.reviewer && prev.decided_label == d.decided_label && same_time {
                return Ok(DecisionAck {
                    run_id: self.run_id().to_owned(),
                    image_id: d.image_id.clone(),
                    record: prev.clone(),
                    duplicate: true,
                    log_length: log.records.len(),
                });
            }
        }
        let record = DecisionRecord {
            seq: log.records.len() as u64 + 1,
            run_id: self.run_id().to_owned(),
            image_id: d.image_id.clone(),
            reviewer: d.reviewer.clone(),
            decided_label: d.decided_label.clone(),
            decided_at,
            supersedes: previous.map(|p| p.seq),
        };
        RunState::append(&mut log, record.clone())?;
        Ok(DecisionAck {
            run_id: self.run_id().to_owned(),
            image_id: d.image_id.clone(),
            record,
            duplicate: false,
            log_length: log.records.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub image_id: String,
    pub final_label: String,
    /// Taxonomy priority of `final_label`; 0 is most important.
    pub priority: usize,
    /// Highest score any vote gave a target class.
    pub max_wildcat_score: f64,
    pub reviewed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_label: Option<String>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueFilter {
    /// Keep only these predicted labels; empty keeps all.
    #[serde(default)]
    pub labels: BTreeSet<String>,
    /// `Some(true)`: reviewed only; `Some(false)`: pending only.
    #[serde(default)]
    pub reviewed: Option<bool>,
}

impl QueueFilter {
    /// Parses the `filter` query value: comma-separated labels plus the
    /// keywords `pending` and `reviewed`.
    pub fn parse(s: &str, taxonomy: &ClassTaxonomy) -> Result<Self, ServiceError> {
        let mut f = QueueFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "pending" => f.reviewed = Some(false),
                "reviewed" => f.reviewed = Some(true),
                l if taxonomy.contains(l) => {
                    f.labels.insert(l.to_owned());
                }
                other => {
                    return Err(ServiceError::InvalidLabel {
                        label: other.to_owned(),
                        taxonomy: taxonomy.name.clone(),
                        classes: taxonomy.classes.clone(),
                    })
                }
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuePage {
    pub run_id: String,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
    pub entries: Vec<QueueEntry>,
}

fn max_target_score(o: &ImageOutcome, targets: &[usize]) -> f64 {
    o.result
        .votes
        .iter()
        .flat_map(|v| targets.iter().filter_map(|&t| v.scores.scores.get(t).copied()))
        .fold(0.0, f64::max)
}

fn queue_order(a: &QueueEntry, b: &QueueEntry) -> Ordering {
    a.priority
        .cmp(&b.priority)
        .then_with(|| b.max_wildcat_score.total_cmp(&a.max_wildcat_score))
        .then_with(|| a.image_id.cmp(&b.image_id))
}

/// Every successfully processed image, most urgent first: by priority of
/// the predicted label, then by wildcat score (high first), then by id.
pub fn build_queue(run: &RunState, filter: &QueueFilter) -> Vec<QueueEntry> {
    let targets = run.taxonomy.target_classes();
    let log = run.log.lock().expect("log lock");
    let mut entries: Vec<QueueEntry> = run
        .snapshot
        .outcomes
        .iter()
        .map(|o| {
            let decided = log.active.get(&o.image_id).map(|&i| log.records[i].decided_label.clone());
            let mut artifacts = vec![format!("/images/{}/artifacts?run={}&kind=original", o.image_id, run.run_id())];
            for i in 0..o.proposals.len() {
                artifacts.push(format!("/images/{}/artifacts?run={}&kind=crop&box={i}", o.image_id, run.run_id()));
                if run.snapshot.config.segmentation {
                    artifacts.push(format!("/images/{}/artifacts?run={}&kind=masked&box={i}", o.image_id, run.run_id()));
                }
            }
            QueueEntry {
                image_id: o.image_id.clone(),
                final_label: o.result.final_label.clone(),
                priority: run.taxonomy.priority(&o.result.final_label).unwrap_or(usize::MAX),
                max_wildcat_score: max_target_score(o, &targets),
                reviewed: decided.is_some(),
                decided_label: decided,
                artifacts,
            }
        })
        .filter(|e| filter.labels.is_empty() || filter.labels.contains(&e.final_label))
        .filter(|e| filter.reviewed.is_none_or(|r| r == e.reviewed))
        .collect();
    entries.sort_by(queue_order);
    entries
}

pub fn queue_page(run: &RunState, filter: &QueueFilter, page: usize, page_size: usize) -> QueuePage {
    let all = build_queue(run, filter);
    let total = all.len();
    let entries = all.into_iter().skip(page.saturating_mul(page_size)).take(page_size).collect();
    QueuePage { run_id: run.run_id().to_owned(), total, page, page_size, entries }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub run_id: String,
    pub taxonomy: String,
    pub n_images: usize,
    pub n_failed: usize,
    pub predicted: BTreeMap<String, usize>,
    pub decided: BTreeMap<String, usize>,
    pub n_reviewed: usize,
    pub n_pending: usize,
    /// Reviewed images whose decision matches the prediction.
    pub confirmed: usize,
    pub overridden: usize,
    pub n_decision_records: usize,
    /// Review time avoided by auto-discarding fallback-labelled images.
    pub review_minutes_saved: f64,
}

pub fn run_stats(run: &RunState) -> RunStats {
    let zero = || run.taxonomy.classes.iter().map(|c| (c.clone(), 0)).collect::<BTreeMap<_, _>>();
    let mut predicted = zero();
    for o in &run.snapshot.outcomes {
        *predicted.entry(o.result.final_label.clone()).or_default() += 1;
    }
    let mut decided = zero();
    let (mut confirmed, mut overridden) = (0, 0);
    let log = run.log.lock().expect("log lock");
    for &i in log.active.values() {
        let r = &log.records[i];
        *decided.entry(r.decided_label.clone()).or_default() += 1;
        match run.outcome(&r.image_id) {
            Some(o) if o.result.final_label == r.decided_label => confirmed += 1,
            _ => overridden += 1,
        }
    }
    let discarded = predicted.get(run.taxonomy.fallback_label()).copied().unwrap_or(0);
    RunStats {
        run_id: run.run_id().to_owned(),
        taxonomy: run.taxonomy.name.clone(),
        n_images: run.snapshot.record.n_images,
        n_failed: run.snapshot.failures.len(),
        predicted,
        decided,
        n_reviewed: log.active.len(),
        n_pending: run.snapshot.outcomes.len().saturating_sub(log.active.len()),
        confirmed,
        overridden,
        n_decision_records: log.records.len(),
        review_minutes_saved: discarded as f64 / DEFAULT_REVIEW_RATE_PER_MINUTE,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WhatifOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<VoteMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<AggregationPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_conf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MovedImage {
    pub image_id: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatifSummary {
    pub run_id: String,
    pub method: VoteMethod,
    pub aggregation: AggregationPolicy,
    pub min_confidence: f64,
    pub counts: BTreeMap<String, usize>,
    pub baseline_counts: BTreeMap<String, usize>,
    pub moved: Vec<MovedImage>,
}

/// Relabels the run from its stored votes under different voting settings.
/// Read-only: the run and its log are untouched.
pub fn whatif(run: &RunState, o: WhatifOverrides) -> Result<WhatifSummary, ServiceError> {
    let cfg = &run.snapshot.config;
    let min_conf = o.min_conf.unwrap_or(cfg.min_confidence);
    if !(0.0..=1.0).contains(&min_conf) {
        return Err(ServiceError::BadRequest(format!("min_conf {min_conf} outside [0, 1]")));
    }
    if min_conf < cfg.min_confidence {
        return Err(ServiceError::UnsupportedOverride(format!(
            "min_conf {min_conf} is below the run's detection threshold {}; proposals under it were never scored",
            cfg.min_confidence
        )));
    }
    let opts = AggregateOptions {
        policy: o.aggregation.unwrap_or(cfg.aggregation),
        method: o.method.unwrap_or(cfg.vote_method),
        global_fallback: cfg.global_fallback,
    };
    let zero = || run.taxonomy.classes.iter().map(|c| (c.clone(), 0)).collect::<BTreeMap<_, _>>();
    let (mut counts, mut baseline_counts) = (zero(), zero());
    let mut moved = Vec::new();
    for outcome in &run.snapshot.outcomes {
        let r = revote_outcome(outcome, min_conf, opts, &run.taxonomy).map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        *counts.entry(r.final_label.clone()).or_default() += 1;
        *baseline_counts.entry(outcome.result.final_label.clone()).or_default() += 1;
        if r.final_label != outcome.result.final_label {
            moved.push(MovedImage {
                image_id: outcome.image_id.clone(),
                from: outcome.result.final_label.clone(),
                to: r.final_label,
            });
        }
    }
    Ok(WhatifSummary {
        run_id: run.run_id().to_owned(),
        method: opts.method,
        aggregation: opts.policy,
        min_confidence: min_conf,
        counts,
        baseline_counts,
        moved,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub run_id: String,
    pub taxonomy: String,
    pub format: String,
    pub n_records: usize,
    pub n_active: usize,
}

fn header(run: &RunState, format: &str, records: &[DecisionRecord]) -> ExportHeader {
    ExportHeader {
        run_id: run.run_id().to_owned(),
        taxonomy: run.taxonomy.name.clone(),
        format: format.to_owned(),
        n_records: records.len(),
        n_active: active_index(records).len(),
    }
}

/// Header line, then every decision in log order flagged active or superseded.
pub fn export_ndjson(run: &RunState) -> String {
    let records = run.decisions();
    let active: BTreeSet<u64> = replay_decisions(&records).values().map(|r| r.seq).collect();
    let mut out = serde_json::to_string(&serde_json::json!({ "header": header(run, "ndjson", &records) }))
        .expect("header serializes");
    out.push('\n');
    for r in &records {
        let mut v = serde_json::to_value(r).expect("record serializes");
        v["active"] = serde_json::Value::Bool(active.contains(&r.seq));
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocFile {
    pub image_id: String,
    pub file_name: String,
    pub xml: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocExport {
    pub header: ExportHeader,
    pub files: Vec<VocFile>,
}

/// One VOC document per active decision, in the run taxonomy's vocabulary.
///
/// A fallback-class decision exports no objects. Any other label is drawn on
/// the proposals the run gave that label; if none did, on every proposal;
/// with no proposals at all, on the whole frame.
pub fn export_voc(run: &RunState) -> VocExport {
    let records = run.decisions();
    let fallback = run.taxonomy.fallback_label();
    let mut files = Vec::new();
    for r in replay_decisions(&records).values() {
        let img = run.image(&r.image_id).expect("decisions reference run images");
        let boxes: Vec<BoundingBox> = if r.decided_label == fallback {
            Vec::new()
        } else {
            match run.outcome(&r.image_id) {
                Some(o) => {
                    let same: Vec<BoundingBox> = o
                        .proposals
                        .iter()
                        .zip(&o.box_labels)
                        .filter(|(_, l)| **l == r.decided_label)
                        .map(|(p, _)| p.bbox)
                        .collect();
                    if !same.is_empty() {
                        same
                    } else if !o.proposals.is_empty() {
                        o.proposals.iter().map(|p| p.bbox).collect()
                    } else {
                        vec![BoundingBox::full()]
                    }
                }
                None => vec![BoundingBox::full()],
            }
        };
        let ann = Annotation {
            image_id: r.image_id.clone(),
            boxes: boxes.into_iter().map(|bbox| LabeledBox { bbox, label: r.decided_label.clone() }).collect(),
            label_set: LabelSet::Wild,
        };
        files.push(VocFile {
            image_id: r.image_id.clone(),
            file_name: format!("{}.xml", r.image_id),
            xml: write_voc_xml(&ann, img),
        });
    }
    VocExport { header: header(run, "voc", &records), files }
}
