//! HTTP rendering service.
//!
//! | route | |
//! |---|---|
//! | `POST /render` | [`RenderRequest`] JSON; JSON [`RenderResponse`], or raw PNG when `Accept: image/png` |
//! | `POST /styles` | raw PNG/JPEG body; returns `{"id": ...}` for use as `{"image_id": ...}` |
//! | `GET /styles` | uploaded style ids |
//! | `GET /checkpoints` | loaded checkpoints |
//! | `GET /views/{dataset}` | named camera poses of a dataset |
//! | `GET /healthz` | liveness |
//!
//! Errors are `{"error": {"kind", "message"}}` with status 400 (invalid request), 404 (unknown
//! checkpoint or dataset), 422 (the checkpoint lacks a capability) or 500.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use conrf_core::pipeline::Renderer;
use conrf_core::training::{NamedCamera, Stage};
use conrf_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::request::{decode_image, RenderRequest, RenderResponse, StyleStore};

#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<Inner>,
}

#[derive(Default)]
struct Inner {
    renderers: RwLock<BTreeMap<String, Arc<Renderer>>>,
    styles: StyleStore,
}

impl AppState {
    pub fn new(renderers: impl IntoIterator<Item = Renderer>) -> Self {
        let state = Self::default();
        for r in renderers {
            state.insert(r);
        }
        state
    }

    /// Adds a checkpoint, replacing any loaded one with the same id. Renders already running
    /// keep the snapshot they started with.
    pub fn insert(&self, renderer: Renderer) -> String {
        let id = renderer.id().to_string();
        self.inner
            .renderers
            .write()
            .expect("renderer lock")
            .insert(id.clone(), Arc::new(renderer));
        id
    }

    pub fn styles(&self) -> &StyleStore {
        &self.inner.styles
    }

    fn renderer(&self, id: Option<&str>) -> Result<Arc<Renderer>, ApiError> {
        let map = self.inner.renderers.read().expect("renderer lock");
        match id {
            Some(id) => map
                .get(id)
                .cloned()
                .ok_or_else(|| ApiError::not_found(format!("unknown checkpoint {id:?}"))),
            None if map.len() == 1 => Ok(map.values().next().cloned().expect("one entry")),
            None if map.is_empty() => Err(ApiError::not_found("no checkpoint is loaded".into())),
            None => Err(ApiError::bad_request("several checkpoints are loaded; name one".into())),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/render", post(render))
        .route("/styles", post(upload_style).get(list_styles))
        .route("/checkpoints", get(list_checkpoints))
        .route("/views/{dataset}", get(list_views))
        .route("/healthz", get(healthz))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "invalid_request",
            message,
        }
    }

    fn not_found(message: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            kind: "not_found",
            message,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::Config(_)
            | Error::Shape(_)
            | Error::Empty(_)
            | Error::Format { .. }
            | Error::Consistency(_)
            | Error::OutOfRange { .. }
            | Error::Json(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            Error::Capability(_) | Error::Checkpoint(_) => (StatusCode::UNPROCESSABLE_ENTITY, "capability"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

fn wants_png(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("image/png"))
}

async fn render(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let request: RenderRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    if request.style.is_none() {
        return Err(ApiError::bad_request("a request needs at least one style source".into()));
    }
    let spec = request.to_spec(state.styles())?;
    let renderer = state.renderer(request.checkpoint.as_deref())?;
    let rendered = tokio::task::spawn_blocking(move || {
        let rendered = renderer.render(&spec)?;
        Ok::<_, Error>((renderer, rendered))
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        kind: "internal",
        message: e.to_string(),
    })?;
    let (renderer, rendered) = rendered?;
    if wants_png(&headers) {
        let png = rendered.image.to_png_bytes()?;
        return Ok((
            [
                (header::CONTENT_TYPE, "image/png".to_string()),
                (header::HeaderName::from_static("x-conrf-checkpoint"), renderer.id().to_string()),
            ],
            png,
        )
            .into_response());
    }
    Ok(Json(RenderResponse::new(renderer.id(), &rendered)?).into_response())
}

async fn upload_style(State(state): State<AppState>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let image = decode_image(&body)?;
    let id = state.styles().insert(image);
    Ok(Json(json!({ "id": id })))
}

async fn list_styles(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.styles().ids())
}

#[derive(Debug, Serialize)]
struct CheckpointInfo {
    id: String,
    dataset: String,
    stages: Vec<Stage>,
    local: bool,
    views: usize,
}

async fn list_checkpoints(State(state): State<AppState>) -> Json<Vec<CheckpointInfo>> {
    let map = state.inner.renderers.read().expect("renderer lock");
    Json(
        map.values()
            .map(|r| {
                let m = &r.checkpoint().manifest;
                CheckpointInfo {
                    id: r.id().to_string(),
                    dataset: m.dataset.clone(),
                    stages: m.stages.clone(),
                    local: r.supports_local(),
                    views: m.views.len(),
                }
            })
            .collect(),
    )
}

async fn list_views(
    State(state): State<AppState>,
    Path(dataset): Path<String>,
) -> Result<Json<Vec<NamedCamera>>, ApiError> {
    let map = state.inner.renderers.read().expect("renderer lock");
    map.values()
        .map(|r| &r.checkpoint().manifest)
        .find(|m| m.dataset == dataset)
        .map(|m| Json(m.views.clone()))
        .ok_or_else(|| ApiError::not_found(format!("no loaded checkpoint for dataset {dataset:?}")))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
