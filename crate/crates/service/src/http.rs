use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use trapsift_core::ensemble::{AggregationPolicy, VoteMethod};
use trapsift_core::pixels::pixel_source;

use crate::review::{export_ndjson, export_voc, queue_page, run_stats, whatif, QueueFilter, ReviewDecision, WhatifOverrides};
use crate::store::{CreateRun, RunStore};
use crate::ServiceError;

pub const DEFAULT_PAGE_SIZE: usize = 50;

pub struct AppState {
    pub store: RunStore,
    /// When set, every request needs `Authorization: Bearer <token>`.
    pub token: Option<String>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::UnknownRun(_) | ServiceError::UnknownImage { .. } | ServiceError::NotFound(_) => {
                StatusCode::NOT_FOUND
            }
            ServiceError::InvalidLabel { .. } | ServiceError::UnsupportedOverride(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Pipeline(_) | ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.kind(), "message": self.to_string() }))).into_response()
    }
}

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<T, ServiceError>;

async fn require_token(State(state): Shared, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            let body = serde_json::json!({ "error": "unauthorized", "message": "missing or wrong bearer token" });
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(req).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Storage(format!("worker task failed: {e}")))?
}

async fn list_runs(State(state): Shared) -> Json<Vec<String>> {
    Json(state.store.run_ids())
}

async fn create_run(State(state): Shared, Json(req): Json<CreateRun>) -> ApiResult<Response> {
    let summary = blocking(move || state.store.create_run(&req)).await?;
    let status = if summary.created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(summary)).into_response())
}

async fn get_run(State(state): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(state.store.get(&id)?.summary(false)).into_response())
}

#[derive(Deserialize)]
struct QueueQuery {
    #[serde(default)]
    filter: Option<String>,
    #[serde(default)]
    page: Option<usize>,
    #[serde(default)]
    page_size: Option<usize>,
}

async fn get_queue(State(state): Shared, Path(id): Path<String>, Query(q): Query<QueueQuery>) -> ApiResult<Response> {
    let run = state.store.get(&id)?;
    let filter = QueueFilter::parse(q.filter.as_deref().unwrap_or(""), &run.taxonomy)?;
    let size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if size == 0 {
        return Err(ServiceError::BadRequest("page_size must be positive".into()));
    }
    Ok(Json(queue_page(&run, &filter, q.page.unwrap_or(0), size)).into_response())
}

async fn post_decision(State(state): Shared, Path(id): Path<String>, Json(d): Json<ReviewDecision>) -> ApiResult<Response> {
    let run = state.store.get(&id)?;
    let ack = blocking(move || run.submit_decision(&d)).await?;
    let status = if ack.duplicate { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(ack)).into_response())
}

async fn get_stats(State(state): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let run = state.store.get(&id)?;
    Ok(Json(run_stats(&run)).into_response())
}

#[derive(Deserialize)]
struct WhatifQuery {
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    aggregation: Option<String>,
    #[serde(default)]
    min_conf: Option<f64>,
}

async fn get_whatif(State(state): Shared, Path(id): Path<String>, Query(q): Query<WhatifQuery>) -> ApiResult<Response> {
    let run = state.store.get(&id)?;
    let bad = |e: String| ServiceError::BadRequest(e);
    let overrides = WhatifOverrides {
        method: q.method.as_deref().map(str::parse::<VoteMethod>).transpose().map_err(|e| bad(e.to_string()))?,
        aggregation: q
            .aggregation
            .as_deref()
            .map(str::parse::<AggregationPolicy>)
            .transpose()
            .map_err(|e| bad(e.to_string()))?,
        min_conf: q.min_conf,
    };
    let summary = blocking(move || whatif(&run, overrides)).await?;
    Ok(Json(summary).into_response())
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn get_export(State(state): Shared, Path(id): Path<String>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let run = state.store.get(&id)?;
    match q.format.as_deref().unwrap_or("ndjson") {
        "ndjson" => Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], export_ndjson(&run)).into_response()),
        "voc" | "xml" => Ok(Json(export_voc(&run)).into_response()),
        other => Err(ServiceError::BadRequest(format!("unknown export format {other:?} (expected ndjson or voc)"))),
    }
}

#[derive(Deserialize)]
struct ArtifactQuery {
    #[serde(default)]
    run: Option<String>,
    #[serde(default)]
    kind: Option<String>,
    #[serde(default, rename = "box")]
    box_index: Option<usize>,
}

fn png(img: &image::RgbImage) -> ApiResult<Response> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| ServiceError::Storage(format!("png encode: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], buf.into_inner()).into_response())
}

/// Without `kind`: the image's proposals and artifact links. With
/// `kind=original|crop|masked` (and `box` for crops): PNG bytes.
async fn get_artifacts(State(state): Shared, Path(image_id): Path<String>, Query(q): Query<ArtifactQuery>) -> ApiResult<Response> {
    let run = match q.run {
        Some(r) => state.store.get(&r)?,
        None => {
            let owners: Vec<_> = state
                .store
                .run_ids()
                .into_iter()
                .filter_map(|r| state.store.get(&r).ok())
                .filter(|r| r.image(&image_id).is_some())
                .collect();
            match owners.len() {
                0 => return Err(ServiceError::NotFound(format!("no run contains image {image_id:?}"))),
                1 => owners.into_iter().next().expect("one owner"),
                _ => return Err(ServiceError::BadRequest(format!("image {image_id:?} is in several runs; pass ?run="))),
            }
        }
    };
    let img = run
        .image(&image_id)
        .cloned()
        .ok_or_else(|| ServiceError::UnknownImage { run_id: run.run_id().to_owned(), image_id: image_id.clone() })?;
    let outcome = run.outcome(&image_id).cloned();
    let Some(kind) = q.kind else {
        let queue_links = crate::review::build_queue(&run, &QueueFilter::default())
            .into_iter()
            .find(|e| e.image_id == image_id)
            .map(|e| e.artifacts)
            .unwrap_or_default();
        return Ok(Json(serde_json::json!({
            "run_id": run.run_id(),
            "image": img,
            "outcome": outcome,
            "artifacts": queue_links,
        }))
        .into_response());
    };
    blocking(move || {
        let source = pixel_source(run.snapshot.config.pixel_source, run.snapshot.catalog_root.clone());
        let frame = source
            .load(&img)
            .map_err(|e| ServiceError::Storage(e.to_string()))?
            .ok_or_else(|| ServiceError::NotFound(format!("run {} has no pixel data for {image_id}", run.run_id())))?;
        if kind == "original" {
            return png(&frame);
        }
        let i = q.box_index.unwrap_or(0);
        let proposal = outcome
            .as_ref()
            .and_then(|o| o.proposals.get(i))
            .ok_or_else(|| ServiceError::NotFound(format!("image {image_id} has no proposal {i}")))?;
        let (crop, masked) = run.pipeline()?.box_artifacts(&img, &frame, proposal, i).map_err(|e| ServiceError::Pipeline(e.to_string()))?;
        match kind.as_str() {
            "crop" => png(&crop),
            "masked" => png(&masked.ok_or_else(|| ServiceError::NotFound("run was made without segmentation".into()))?),
            other => Err(ServiceError::BadRequest(format!("unknown artifact kind {other:?} (original, crop, masked)"))),
        }
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/queue", get(get_queue))
        .route("/runs/{id}/decisions", post(post_decision))
        .route("/runs/{id}/stats", get(get_stats))
        .route("/runs/{id}/whatif", get(get_whatif))
        .route("/runs/{id}/export", get(get_export))
        .route("/images/{id}/artifacts", get(get_artifacts))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
