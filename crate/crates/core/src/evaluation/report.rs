use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvaluationError, EvaluationReport, ExperimentRun};

/// One line of `report.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub description: String,
    pub overall_accuracy: String,
    pub target_recall: String,
    pub report: EvaluationReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

pub fn experiment_record(run: &ExperimentRun) -> ExperimentRecord {
    ExperimentRecord {
        experiment: run.spec.id.to_string(),
        description: run.spec.description.clone(),
        overall_accuracy: run.report.overall_percent(),
        target_recall: run.report.target_percent(),
        report: run.report.clone(),
        failures: run.run.failures.iter().map(|f| format!("{} [{}]: {}", f.image_id, f.stage, f.error)).collect(),
    }
}

fn render_one(out: &mut String, r: &ExperimentRecord) {
    let rep = &r.report;
    let _ = writeln!(out, "== {}: {}", r.experiment, r.description);
    for (k, v) in &rep.metadata {
        if k != "experiment" && k != "description" {
            let _ = writeln!(out, "  {k:<16} {v}");
        }
    }
    let ratio = |x: Option<super::Ratio>| x.map_or_else(|| "n/a".to_owned(), |r| r.to_string());
    let _ = writeln!(out, "  images           {}", rep.n_images);
    let _ = writeln!(out, "  overall accuracy {}", ratio(rep.overall_accuracy));
    let _ = writeln!(
        out,
        "  excl. {:<10} {}",
        rep.fallback_class,
        ratio(rep.overall_accuracy_excluding_fallback)
    );
    let _ = writeln!(out, "  target recall    {} [{}]", ratio(rep.target_recall), rep.target_classes.join(","));
    if let Some(m) = rep.review_savings_minutes {
        let _ = writeln!(out, "  review savings   {m:.1} min");
    }
    let width = rep.confusion.classes.iter().map(String::len).max().unwrap_or(0).max(6);
    let _ = write!(out, "  {:width$}", "truth\\pred");
    for c in &rep.confusion.classes {
        let _ = write!(out, " {c:>width$}");
    }
    out.push('\n');
    for (c, row) in rep.confusion.classes.iter().zip(&rep.confusion.counts) {
        let _ = write!(out, "  {c:width$}");
        for n in row {
            let _ = write!(out, " {n:>width$}");
        }
        out.push('\n');
    }
    for pc in &rep.per_class {
        let _ = writeln!(
            out,
            "  {:width$} support={} predicted={} recall={} precision={}",
            pc.class,
            pc.support,
            pc.predicted,
            pc.recall.map_or_else(|| "n/a".into(), |r| r.percent()),
            pc.precision.map_or_else(|| "n/a".into(), |r| r.percent()),
        );
    }
    for f in &r.failures {
        let _ = writeln!(out, "  failed: {f}");
    }
    out.push('\n');
}

/// Per-experiment detail followed by a summary table.
pub fn render_report_text(records: &[ExperimentRecord]) -> String {
    let mut out = String::new();
    for r in records {
        render_one(&mut out, r);
    }
    let idw = records.iter().map(|r| r.experiment.len()).max().unwrap_or(0).max(10);
    let dw = records.iter().map(|r| r.description.chars().count()).max().unwrap_or(0).max(11);
    let _ = writeln!(out, "{:idw$}  {:dw$}  {:>8}  {:>13}", "experiment", "description", "overall", "target recall");
    for r in records {
        let pad = dw - r.description.chars().count();
        let _ = writeln!(
            out,
            "{:idw$}  {}{}  {:>8}  {:>13}",
            r.experiment,
            r.description,
            " ".repeat(pad),
            r.overall_accuracy,
            r.target_recall
        );
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<(), EvaluationError> {
    std::fs::write(path, text).map_err(|source| EvaluationError::Io { path: path.display().to_string(), source })
}

/// Writes `report.txt` and `report.ndjson` into `dir`.
pub fn write_reports(dir: &Path, records: &[ExperimentRecord]) -> Result<(), EvaluationError> {
    std::fs::create_dir_all(dir).map_err(|source| EvaluationError::Io { path: dir.display().to_string(), source })?;
    write_file(&dir.join("report.txt"), &render_report_text(records))?;
    let mut nd = String::new();
    for r in records {
        nd.push_str(&serde_json::to_string(r).expect("record serializes"));
        nd.push('\n');
    }
    write_file(&dir.join("report.ndjson"), &nd)
}
