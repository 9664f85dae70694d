use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trapsift_core::curation::SplitAssignment;
use trapsift_core::evaluation::{
    experiment_record, render_report_text, run_experiment, ExperimentContext, ExperimentOverrides,
};
use trapsift_core::BoundingBox;
use trapsift_service::{export_ndjson, CreateRun, ReviewDecision, RunStore};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic-200")
}

fn fx(name: &str) -> String {
    fixture().join(name).to_str().unwrap().to_owned()
}

fn trapsift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trapsift")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_subcommand_prints_usage_and_exits_1() {
    let o = trapsift(&[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage: trapsift"));
    assert!(o.stdout.is_empty());
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&trapsift(&["--help"])), 0);
    assert_eq!(code(&trapsift(&["split", "--help"])), 0);
    assert_eq!(code(&trapsift(&["frobnicate"])), 1);
    assert_eq!(code(&trapsift(&["split", "--manifest", "m", "--out", "o", "--seed", "1", "--bogus"])), 1);
    // The seed is mandatory for randomized subcommands.
    let o = trapsift(&["split", "--manifest", &fx("manifest.ndjson"), "--out", "o"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
    // Fractions must parse and sum to one.
    assert_eq!(code(&trapsift(&["split", "--manifest", "m", "--out", "o", "--seed", "1", "--fractions", "0.5,0.2,0.1"])), 1);
}

#[test]
fn split_writes_a_reproducible_split_file() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = trapsift(&[
            "split", "--manifest", &fx("manifest.ndjson"), "--no-pixels", "--fractions", "0.7,0.2,0.1", "--seed", "42",
            "--out", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("split.txt")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let split = SplitAssignment::from_lines(&a).unwrap();
    assert_eq!(split.seed, 42);
    // 108 captivity frames: 10 + 10 three-frame bursts and 6 eight-frame ones.
    assert_eq!(split.assignments.len(), 26);
}

#[test]
fn holdout_split_sends_the_camera_to_test() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trapsift(&[
        "split", "--manifest", &fx("manifest.ndjson"), "--no-pixels", "--seed", "3", "--holdout", "2", "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let split = SplitAssignment::from_lines(&fs::read_to_string(tmp.path().join("split.txt")).unwrap()).unwrap();
    for (burst, which) in &split.assignments {
        assert_eq!(burst.starts_with("C2-"), which.as_str() == "test", "{burst} -> {which}");
    }
}

#[test]
fn experiment_t8a_matches_the_library_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trapsift(&["experiment", "--suite", &fx("experiments.toml"), "--id", "T8a", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let ctx = ExperimentContext::load(&fixture().join("experiments.toml")).unwrap();
    let run = run_experiment(&ctx, &"T8a".parse().unwrap(), ExperimentOverrides::default()).unwrap();
    let record = experiment_record(&run);
    assert_eq!(fs::read_to_string(tmp.path().join("report.txt")).unwrap(), render_report_text(std::slice::from_ref(&record)));
    let line = serde_json::to_string(&record).unwrap() + "\n";
    assert_eq!(fs::read_to_string(tmp.path().join("report.ndjson")).unwrap(), line);
}

#[test]
fn unknown_experiment_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trapsift(&["experiment", "--suite", &fx("experiments.toml"), "--id", "T9", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("T8a"));
}

#[test]
fn dry_run_prints_every_default_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = trapsift(&[
        "run", "--config", &fx("pipeline.toml"), "--manifest", &fx("manifest.ndjson"), "--out", s(&out), "--dry-run",
        "--workers", "3", "--taxonomy", "five_class", "--segmentation", "false",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
    let printed: toml::Value = toml::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    // Flags win over the file; unset fields show their defaults.
    assert_eq!(printed["workers"].as_integer(), Some(3));
    assert_eq!(printed["taxonomy"].as_str(), Some("five_class"));
    assert_eq!(printed["segmentation"].as_bool(), Some(false));
    assert_eq!(printed["vote_method"].as_str(), Some("best_accuracy"));
    for key in ["min_confidence", "crop_pad", "input_size", "fill", "max_failure_fraction", "global_fallback"] {
        assert!(printed.get(key).is_some(), "{key} missing from effective config");
    }
}

#[test]
fn missing_inputs_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trapsift(&["ingest", "--manifest", "/nonexistent/manifest.ndjson", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    let o = trapsift(&["run", "--config", "/nonexistent.toml", "--manifest", &fx("manifest.ndjson"), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
}

fn run_fixture(out: &Path, workers: &str) -> Output {
    trapsift(&[
        "run", "--config", &fx("pipeline.toml"), "--manifest", &fx("manifest.ndjson"), "--no-pixels", "--workers",
        workers, "--out", s(out),
    ])
}

#[test]
fn run_output_does_not_depend_on_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run_fixture(&a, "1")), 0);
    assert_eq!(code(&run_fixture(&b, "4")), 0);
    for f in ["results.ndjson", "run.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("results.ndjson")).unwrap().lines().count(), 200);
}

#[test]
fn stage_failures_over_threshold_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    for f in ["pipeline.toml", "detector.ndjson"] {
        fs::copy(fixture().join(f), tmp.path().join(f)).unwrap();
    }
    // Scores only for camera C1: every other image with a proposal fails.
    let table: String = fs::read_to_string(fixture().join("classifier.ndjson"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"cap-C1-"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(tmp.path().join("classifier.ndjson"), table).unwrap();
    let out = tmp.path().join("out");
    let o = trapsift(&[
        "run", "--config", s(&tmp.path().join("pipeline.toml")), "--manifest", &fx("manifest.ndjson"), "--no-pixels",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    // Results are still written for inspection.
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["status"], "failures_over_threshold");
    assert!(fs::read_to_string(out.join("results.ndjson")).unwrap().contains("\"failure\""));
}

#[test]
fn whatif_and_evaluate_read_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    assert_eq!(code(&run_fixture(&run_dir, "1")), 0);

    let same = tmp.path().join("same");
    assert_eq!(code(&trapsift(&["whatif", "--run", s(&run_dir), "--out", s(&same)])), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(same.join("whatif.json")).unwrap()).unwrap();
    assert_eq!(v["moved"].as_array().unwrap().len(), 0);
    assert_eq!(v["counts"], v["baseline_counts"]);

    let hier = tmp.path().join("hier");
    assert_eq!(code(&trapsift(&["whatif", "--run", s(&run_dir), "--method", "hierarchical", "--out", s(&hier)])), 0);
    let o = trapsift(&["whatif", "--run", s(&run_dir), "--min-conf", "0.05", "--out", s(&hier)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("detection threshold"));

    let eval = tmp.path().join("eval");
    let o = trapsift(&[
        "evaluate", "--run", s(&run_dir), "--manifest", &fx("manifest.ndjson"), "--no-pixels", "--annotations",
        &fx("annotations/wild"), "--label-set", "wild", "--out", s(&eval),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["n_images"], 92);
    // Default discard set is the fallback class, the second column.
    let discarded: u64 = v["report"]["confusion"]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r[1].as_u64().unwrap())
        .sum();
    assert_eq!(v["auto_discard"], serde_json::json!(["NotWildcat"]));
    assert_eq!(v["review_minutes_saved"].as_f64().unwrap(), discarded as f64 / 25.0);
}

#[test]
fn curation_subcommands_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let bg = |name: &str| {
        let out = tmp.path().join(name);
        let o = trapsift(&[
            "sample-bg", "--manifest", &fx("manifest.ndjson"), "--no-pixels", "--annotations", &fx("annotations/set1"),
            "--label-set", "set1", "--seed", "11", "--per-image", "2", "--out", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("background.ndjson")).unwrap()
    };
    let a = bg("a");
    assert_eq!(a, bg("b"));
    assert_eq!(a.lines().count(), 108);
    for line in a.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let boxes: Vec<BoundingBox> = serde_json::from_value(v["boxes"].clone()).unwrap();
        assert!(boxes.len() <= 2);
    }

    let out = tmp.path().join("remap");
    let o = trapsift(&[
        "remap", "--manifest", &fx("manifest.ndjson"), "--no-pixels", "--annotations", &fx("annotations/set1"),
        "--label-set", "set1", "--taxonomy", "two_class_no_unknown", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let labels: BTreeSet<String> = fs::read_to_string(out.join("remapped.ndjson"))
        .unwrap()
        .lines()
        .flat_map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["boxes"].as_array().unwrap().iter().map(|b| b["label"].as_str().unwrap().to_owned()).collect::<Vec<_>>()
        })
        .collect();
    assert!(labels.iter().all(|l| l == "Wildcat" || l == "NotWildcat"), "{labels:?}");

    let out = tmp.path().join("ingest");
    assert_eq!(code(&trapsift(&["ingest", "--manifest", &fx("manifest.ndjson"), "--no-pixels", "--out", s(&out)])), 0);
    assert_eq!(fs::read_to_string(out.join("catalog.ndjson")).unwrap().lines().count(), 200);
}

#[test]
fn export_writes_the_store_decision_log() {
    let tmp = tempfile::tempdir().unwrap();
    let store_dir = tmp.path().join("store");
    let run_id = {
        let store = RunStore::open(&store_dir).unwrap();
        let summary = store
            .create_run(&CreateRun {
                manifest: fixture().join("manifest.ndjson"),
                config: fixture().join("pipeline.toml"),
                no_pixels: true,
                workers: Some(1),
            })
            .unwrap();
        let run = store.get(&summary.run_id).unwrap();
        for (img, label) in [("wild-W01-000", "Wildcat"), ("wild-W01-001", "NotWildcat"), ("wild-W01-000", "NotWildcat")] {
            run.submit_decision(&ReviewDecision {
                image_id: img.into(),
                reviewer: "ana".into(),
                decided_label: label.into(),
                decided_at: Some("2026-01-01T00:00:00Z".into()),
            })
            .unwrap();
        }
        summary.run_id
    };

    let out = tmp.path().join("nd");
    let o = trapsift(&["export", "--store", s(&store_dir), "--run", &run_id, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let store = RunStore::open(&store_dir).unwrap();
    assert_eq!(fs::read_to_string(out.join("decisions.ndjson")).unwrap(), export_ndjson(&store.get(&run_id).unwrap()));

    let out = tmp.path().join("voc");
    let o = trapsift(&["export", "--store", s(&store_dir), "--run", &run_id, "--format", "voc", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("wild-W01-000.xml").is_file());
    assert!(out.join("wild-W01-001.xml").is_file());

    assert_eq!(code(&trapsift(&["export", "--store", s(&store_dir), "--run", "nope", "--out", s(&out)])), 2);
}
