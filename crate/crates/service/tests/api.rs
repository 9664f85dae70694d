use std::cmp::Reverse;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;
use trapsift_core::catalog::{parse_voc_boxes, CameraTrapImage, ImageSource};
use trapsift_core::ensemble::{
    ImageOutcome, PipelineConfig, RunRecord, RunStatus, SlotDescriptor, Vote, VoteMethod, VoteResult,
};
use trapsift_core::stages::{BackendKind, ClassScores, Scale};
use trapsift_core::{BoundingBox, RegionProposal, TaxonomyRegistry};
use trapsift_service::{replay_decisions, router, AppState, RunSnapshot, RunStore};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic-200")
}

fn app(root: &Path, token: Option<&str>) -> (axum::Router, Arc<AppState>) {
    let state = Arc::new(AppState { store: RunStore::open(root).unwrap(), token: token.map(str::to_owned) });
    (router(state.clone()), state)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Starts a run over the 200-image fixture and returns its id.
async fn fixture_run(app: &axum::Router) -> String {
    let body = json!({
        "manifest": fixture_dir().join("manifest.ndjson"),
        "config": fixture_dir().join("pipeline.toml"),
        "no_pixels": true,
    });
    let (s, v) = call_json(app, "POST", "/runs", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["run_id"].as_str().unwrap().to_owned()
}

fn image(id: &str) -> CameraTrapImage {
    CameraTrapImage {
        image_id: id.into(),
        camera_id: "cam".into(),
        captured_at: None,
        file_ref: format!("{id}.jpg"),
        width_px: 200,
        height_px: 100,
        source: ImageSource::External,
        is_infrared: false,
    }
}

fn two_class_vote(model: &str, scores: [f64; 2], box_index: usize) -> Vote {
    let t = TaxonomyRegistry::builtin().get("two_class").unwrap().clone();
    Vote::new(model, Scale::Local { box_index }, ClassScores::new(&t, scores.to_vec()).unwrap(), &t)
}

/// A hand-made two-class run: `labels[i]` is image i's final label, each
/// backed by one box with three votes.
fn crafted(run_id: &str, rows: &[(&str, [[f64; 2]; 3])]) -> RunSnapshot {
    let mut config = PipelineConfig::new(SlotDescriptor::new("det", BackendKind::Fixture));
    config.taxonomy = "two_class".into();
    let outcomes: Vec<ImageOutcome> = rows
        .iter()
        .enumerate()
        .map(|(i, (label, votes))| {
            let id = format!("img{i:02}");
            ImageOutcome {
                image_id: id.clone(),
                proposals: vec![RegionProposal {
                    bbox: BoundingBox::new(0.1, 0.2, 0.5, 0.6).unwrap(),
                    confidence: 0.9,
                    detector_class: "animal".into(),
                }],
                box_labels: vec![(*label).into()],
                result: VoteResult {
                    image_id: id,
                    final_label: (*label).into(),
                    method: VoteMethod::BestAccuracy,
                    votes: votes.iter().enumerate().map(|(m, s)| two_class_vote(&format!("m{m}"), *s, 0)).collect(),
                    audit: vec![],
                },
            }
        })
        .collect();
    RunSnapshot {
        run_id: run_id.into(),
        record: RunRecord {
            config_hash: config.config_hash(),
            seed: 0,
            taxonomy: "two_class".into(),
            vote_method: "best_accuracy".into(),
            aggregation: "priority".into(),
            segmentation: false,
            global_fallback: true,
            min_confidence: config.min_confidence,
            backends: vec![],
            n_images: rows.len(),
            n_failed: 0,
            max_failure_fraction: config.max_failure_fraction,
            status: RunStatus::Ok,
        },
        config,
        config_dir: PathBuf::from("."),
        manifest: PathBuf::from("crafted"),
        catalog_root: PathBuf::from("."),
        images: (0..rows.len()).map(|i| image(&format!("img{i:02}"))).collect(),
        outcomes,
        failures: vec![],
    }
}

const W: [f64; 2] = [0.8, 0.2];
const N: [f64; 2] = [0.3, 0.7];

#[tokio::test]
async fn wildcats_lead_the_queue() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path(), None);
    let rows = [("NotWildcat", [N, N, N]), ("Wildcat", [W, W, W]), ("NotWildcat", [N, N, W]), ("Wildcat", [W, W, N]), ("NotWildcat", [N, N, N])];
    state.store.insert_snapshot(crafted("crafted", &rows)).unwrap();
    let (s, v) = call_json(&app, "GET", "/runs/crafted/queue", None).await;
    assert_eq!(s, StatusCode::OK);
    let labels: Vec<&str> = v["entries"].as_array().unwrap().iter().map(|e| e["final_label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["Wildcat", "Wildcat", "NotWildcat", "NotWildcat", "NotWildcat"]);
    // Within NotWildcat, the image with a wildcat-leaning vote comes first.
    assert_eq!(v["entries"][2]["image_id"], "img02");

    state.store.insert_snapshot(crafted("empty", &[])).unwrap();
    let (_, v) = call_json(&app, "GET", "/runs/empty/queue", None).await;
    assert_eq!(v["total"], 0);
    let (s, v) = call_json(&app, "GET", "/runs/nope/queue", None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_run")));
}

#[tokio::test]
async fn queue_order_matches_sort_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path(), None);
    let run_id = fixture_run(&app).await;
    let run = state.store.get(&run_id).unwrap();
    let classes = &run.taxonomy.classes;
    let target: Vec<usize> = (0..classes.len()).filter(|&i| classes[i].starts_with("Wildcat")).collect();
    let mut oracle: Vec<(usize, Reverse<u64>, String)> = run
        .snapshot
        .outcomes
        .iter()
        .map(|o| {
            let pri = classes.iter().position(|c| *c == o.result.final_label).unwrap();
            let mut best = 0.0f64;
            for v in &o.result.votes {
                for &t in &target {
                    if v.scores.scores[t] > best {
                        best = v.scores.scores[t];
                    }
                }
            }
            // Non-negative floats order like their bit patterns.
            (pri, Reverse(best.to_bits()), o.image_id.clone())
        })
        .collect();
    oracle.sort();
    assert!(oracle.len() >= 100);

    let mut got = Vec::new();
    for page in 0.. {
        let (_, v) = call_json(&app, "GET", &format!("/runs/{run_id}/queue?page={page}&page_size=37"), None).await;
        let entries = v["entries"].as_array().unwrap();
        if entries.is_empty() {
            break;
        }
        got.extend(entries.iter().map(|e| e["image_id"].as_str().unwrap().to_owned()));
    }
    assert_eq!(got, oracle.into_iter().map(|o| o.2).collect::<Vec<_>>());

    let (_, v) = call_json(&app, "GET", &format!("/runs/{run_id}/queue?filter=Wildcat&page_size=500"), None).await;
    assert!(v["entries"].as_array().unwrap().iter().all(|e| e["final_label"] == "Wildcat"));
    let (s, _) = call_json(&app, "GET", &format!("/runs/{run_id}/queue?filter=Lynx"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn decisions_log_dedupe_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path(), None);
    let run_id = fixture_run(&app).await;
    let uri = format!("/runs/{run_id}/decisions");
    let order_before: Vec<String> = trapsift_service::build_queue(&state.store.get(&run_id).unwrap(), &Default::default())
        .into_iter()
        .map(|e| e.image_id)
        .collect();

    let d = json!({"image_id": "wild-W01-000", "reviewer": "ana", "decided_label": "NotWildcat"});
    let (s, v) = call_json(&app, "POST", &uri, Some(d.clone())).await;
    assert_eq!((s, v["log_length"].as_u64()), (StatusCode::CREATED, Some(1)));
    let (s, v) = call_json(&app, "POST", &uri, Some(d)).await;
    assert_eq!((s, v["duplicate"].as_bool(), v["log_length"].as_u64()), (StatusCode::OK, Some(true), Some(1)));

    let d2 = json!({"image_id": "wild-W01-000", "reviewer": "ben", "decided_label": "Wildcat"});
    let (s, v) = call_json(&app, "POST", &uri, Some(d2)).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["record"]["supersedes"], 1);

    let (s, v) = call_json(&app, "POST", &uri, Some(json!({"image_id": "wild-W01-000", "reviewer": "ana", "decided_label": "Lynx"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_label")));
    let (s, _) = call_json(&app, "POST", &uri, Some(json!({"image_id": "nope", "reviewer": "ana", "decided_label": "Wildcat"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    // A scripted sequence of decisions with conflicts.
    let ids: Vec<String> = order_before.iter().take(12).cloned().collect();
    for (k, id) in ids.iter().cycle().take(30).enumerate() {
        let label = if k % 3 == 0 { "Wildcat" } else { "NotWildcat" };
        let body = json!({"image_id": id, "reviewer": format!("r{}", k % 4), "decided_label": label});
        let (s, _) = call_json(&app, "POST", &uri, Some(body)).await;
        assert!(s.is_success());
    }

    // Queue order ignores decisions.
    let order_after: Vec<String> = trapsift_service::build_queue(&state.store.get(&run_id).unwrap(), &Default::default())
        .into_iter()
        .map(|e| e.image_id)
        .collect();
    assert_eq!(order_before, order_after);

    // Replay the on-disk log from empty in a fresh store and compare.
    drop(app);
    drop(state);
    let reopened = RunStore::open(dir.path()).unwrap();
    let run = reopened.get(&run_id).unwrap();
    let log = run.decisions();
    let replayed = replay_decisions(&log);
    let queue = trapsift_service::build_queue(&run, &Default::default());
    for e in &queue {
        assert_eq!(e.decided_label.as_deref(), replayed.get(&e.image_id).map(|r| r.decided_label.as_str()), "{}", e.image_id);
    }
    let active_from_scratch: std::collections::BTreeMap<&str, &str> = {
        let mut m = std::collections::BTreeMap::new();
        for r in &log {
            m.insert(r.image_id.as_str(), r.decided_label.as_str());
        }
        m
    };
    assert_eq!(replayed.len(), active_from_scratch.len());
    let stats = trapsift_service::run_stats(&run);
    assert_eq!(stats.n_reviewed, replayed.len());
    assert_eq!(stats.n_decision_records, log.len());
    assert!(log.windows(2).all(|w| w[0].seq + 1 == w[1].seq));
}

#[tokio::test]
async fn whatif_recomputes_without_mutating() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path(), None);
    // Two Background-like votes and one wildcat vote.
    state.store.insert_snapshot(crafted("c3", &[("NotWildcat", [N, N, W])])).unwrap();
    let (s, v) = call_json(&app, "GET", "/runs/c3/whatif?method=hierarchical", None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["moved"], json!([{"image_id": "img00", "from": "NotWildcat", "to": "Wildcat"}]));
    let (_, v) = call_json(&app, "GET", "/runs/c3/whatif?method=best_accuracy", None).await;
    assert_eq!(v["moved"], json!([]));

    let run_id = fixture_run(&app).await;
    let run_dir = dir.path().join("runs").join(&run_id);
    let snap_before = std::fs::read(run_dir.join("snapshot.json")).unwrap();
    let (_, v) = call_json(&app, "GET", &format!("/runs/{run_id}/whatif"), None).await;
    assert_eq!(v["moved"], json!([]));
    assert_eq!(v["counts"], v["baseline_counts"]);
    for q in ["method=hierarchical", "min_conf=0.5", "aggregation=pooled&min_conf=0.3", "method=hierarchical&aggregation=pooled"] {
        let (s, v) = call_json(&app, "GET", &format!("/runs/{run_id}/whatif?{q}"), None).await;
        assert_eq!(s, StatusCode::OK, "{q}: {v}");
        let total: u64 = v["counts"].as_object().unwrap().values().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(total, 200);
    }
    let (s, v) = call_json(&app, "GET", &format!("/runs/{run_id}/whatif?min_conf=0.05"), None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("unsupported_override")));
    let (s, _) = call_json(&app, "GET", &format!("/runs/{run_id}/whatif?method=bogus"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(std::fs::read(run_dir.join("snapshot.json")).unwrap(), snap_before);
    assert!(!run_dir.join("decisions.ndjson").exists());
}

#[tokio::test]
async fn export_round_trips_through_the_annotation_parser() {
    let dir = tempfile::tempdir().unwrap();
    let (app, state) = app(dir.path(), None);
    let run_id = fixture_run(&app).await;

    let (s, body) = call(&app, "GET", &format!("/runs/{run_id}/export?format=ndjson"), None).await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["header"]["n_records"], 0);

    let run = state.store.get(&run_id).unwrap();
    let wildcat = run
        .snapshot
        .outcomes
        .iter()
        .find(|o| o.result.final_label == "Wildcat" && !o.proposals.is_empty())
        .unwrap()
        .clone();
    let mut decided = std::collections::BTreeMap::new();
    decided.insert(wildcat.image_id.clone(), "Wildcat");
    for (i, o) in run.snapshot.outcomes.iter().enumerate().filter(|(i, _)| i % 17 == 0) {
        decided.insert(o.image_id.clone(), if i % 2 == 0 { "NotWildcat" } else { "Wildcat" });
    }
    for (id, label) in &decided {
        let (s, _) = call_json(&app, "POST", &format!("/runs/{run_id}/decisions"), Some(json!({"image_id": id, "reviewer": "ana", "decided_label": label}))).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    // Supersede one so history shows up in the export.
    let first = decided.keys().next().unwrap().clone();
    call_json(&app, "POST", &format!("/runs/{run_id}/decisions"), Some(json!({"image_id": first, "reviewer": "ben", "decided_label": "Wildcat"}))).await;
    decided.insert(first, "Wildcat");

    let (_, body) = call(&app, "GET", &format!("/runs/{run_id}/export"), None).await;
    let lines: Vec<Value> = String::from_utf8(body).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), decided.len() + 2);
    assert_eq!(lines.iter().filter(|l| l["active"] == false).count(), 1);

    let (_, v) = call_json(&app, "GET", &format!("/runs/{run_id}/export?format=voc"), None).await;
    let files = v["files"].as_array().unwrap();
    assert_eq!(files.len(), decided.len());
    for f in files {
        let id = f["image_id"].as_str().unwrap();
        let img = run.image(id).unwrap();
        let (boxes, _) = parse_voc_boxes(f["xml"].as_str().unwrap(), id, img, &run.taxonomy.classes).unwrap();
        let label = boxes
            .iter()
            .map(|b| run.taxonomy.priority(&b.label).unwrap())
            .min()
            .map_or(run.taxonomy.fallback_label(), |p| run.taxonomy.classes[p].as_str());
        assert_eq!(label, decided[id], "{id}");
        if id == wildcat.image_id {
            let want: [f64; 4] = wildcat.proposals[0].bbox.into();
            let got: [f64; 4] = boxes[0].bbox.into();
            for (w, g) in want.iter().zip(got) {
                assert!((w - g).abs() <= 1.0 / 480.0, "{want:?} vs {got:?}");
            }
        }
    }
    let (s, _) = call_json(&app, "GET", &format!("/runs/{run_id}/export?format=csv"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn runs_are_idempotent_and_persist() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), None);
    let id = fixture_run(&app).await;
    let body = json!({"manifest": fixture_dir().join("manifest.ndjson"), "config": fixture_dir().join("pipeline.toml"), "no_pixels": true, "workers": 3});
    let (s, v) = call_json(&app, "POST", "/runs", Some(body)).await;
    assert_eq!((s, v["run_id"].as_str()), (StatusCode::OK, Some(id.as_str())));
    let (s, v) = call_json(&app, "GET", &format!("/runs/{id}"), None).await;
    assert_eq!((s, v["n_outcomes"].as_u64()), (StatusCode::OK, Some(200)));
    let (_, v) = call_json(&app, "GET", &format!("/runs/{id}/stats"), None).await;
    let predicted: u64 = v["predicted"].as_object().unwrap().values().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(predicted, 200);
    let (s, _) = call_json(&app, "POST", "/runs", Some(json!({"manifest": "/nonexistent.ndjson", "config": fixture_dir().join("pipeline.toml")}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (app2, _) = self::app(dir.path(), None);
    let (s, _) = call_json(&app2, "GET", &format!("/runs/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn static_token_guards_every_route() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(dir.path(), Some("s3cret"));
    let (s, _) = call_json(&app, "GET", "/runs", None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let req = Request::builder().uri("/runs").header("authorization", "Bearer s3cret").body(Body::empty()).unwrap();
    assert_eq!(app.oneshot(req).await.unwrap().status(), StatusCode::OK);
}

#[tokio::test]
async fn artifacts_stream_png_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture_dir();
    let cfg = std::fs::read_to_string(fx.join("pipeline.toml"))
        .unwrap()
        .replace("pixel_source = \"none\"", "pixel_source = \"synthetic\"")
        .replace("\"detector.ndjson\"", &format!("{:?}", fx.join("detector.ndjson")))
        .replace("\"classifier.ndjson\"", &format!("{:?}", fx.join("classifier.ndjson")));
    let cfg_path = dir.path().join("pipeline.toml");
    std::fs::write(&cfg_path, cfg).unwrap();
    let (app, state) = app(&dir.path().join("store"), None);
    let body = json!({"manifest": fx.join("manifest.ndjson"), "config": cfg_path, "no_pixels": true});
    let (s, v) = call_json(&app, "POST", "/runs", Some(body)).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let run_id = v["run_id"].as_str().unwrap().to_owned();
    let run = state.store.get(&run_id).unwrap();
    let o = run.snapshot.outcomes.iter().find(|o| !o.proposals.is_empty()).unwrap();

    let (s, v) = call_json(&app, "GET", &format!("/images/{}/artifacts", o.image_id), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["artifacts"].as_array().unwrap().len() >= 3);
    let decode = |b: Vec<u8>| image::load_from_memory_with_format(&b, image::ImageFormat::Png).unwrap().to_rgb8();
    let (s, b) = call(&app, "GET", &format!("/images/{}/artifacts?run={run_id}&kind=original", o.image_id), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(decode(b).dimensions(), (640, 480));
    let rect = trapsift_core::curation::crop_rect(&o.proposals[0].bbox, 640, 480, 0.0).unwrap();
    for kind in ["crop", "masked"] {
        let (s, b) = call(&app, "GET", &format!("/images/{}/artifacts?run={run_id}&kind={kind}&box=0", o.image_id), None).await;
        assert_eq!(s, StatusCode::OK, "{kind}");
        assert_eq!(decode(b).dimensions(), (rect.width(), rect.height()), "{kind}");
    }
    let (s, _) = call(&app, "GET", &format!("/images/{}/artifacts?run={run_id}&kind=crop&box=99", o.image_id), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
