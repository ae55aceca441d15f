//! HTTP endpoints for the annotation UI.
//!
//! The dataset is loaded once and shared read-only between requests. The
//! export endpoint is the only one that writes, and only below the
//! configured output directory.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::colmap::{ImageId, SparseModel};
use crate::propagation::{
    points_from_json, points_to_json, run_points_prompt, MaskPredictor, PointJson, PredictorError, PromptSet,
    PropagationError, ViewDiagnostic, ViewInput,
};

pub struct ServiceState {
    model: SparseModel,
    views: Vec<ViewInput>,
    predictor: Box<dyn MaskPredictor>,
    export_dir: PathBuf,
}

impl ServiceState {
    pub fn new(model: SparseModel, image_dir: &Path, predictor: Box<dyn MaskPredictor>, export_dir: PathBuf) -> Self {
        let views = ViewInput::from_model(&model, Some(image_dir));
        Self {
            model,
            views,
            predictor,
            export_dir,
        }
    }

    fn view(&self, id: ImageId) -> Result<&ViewInput, ApiError> {
        self.views
            .iter()
            .find(|v| v.view_id == id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown view {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<PredictorError> for ApiError {
    fn from(e: PredictorError) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, e.to_string())
    }
}

impl From<PropagationError> for ApiError {
    fn from(e: PropagationError) -> Self {
        let status = match &e {
            PropagationError::ViewAbsent(_) => StatusCode::NOT_FOUND,
            PropagationError::NoSparseCorrespondence(_) | PropagationError::EmptyMask => StatusCode::UNPROCESSABLE_ENTITY,
            PropagationError::InvalidPrompt(_) | PropagationError::EmptyCandidates => StatusCode::BAD_REQUEST,
            PropagationError::Predictor(_) => StatusCode::BAD_GATEWAY,
            PropagationError::NoDetection(_) | PropagationError::Colmap(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewInfo {
    pub view_id: ImageId,
    pub name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointsRequest {
    pub view_id: ImageId,
    pub points: Vec<PointJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPoints {
    pub view_id: ImageId,
    pub points: Vec<PointJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagateResponse {
    pub views: Vec<ViewPoints>,
    pub dropped: Vec<ViewDiagnostic>,
    pub timing_ms: f64,
}

/// The prompt to export is recomputed from the clicks, so the server keeps
/// no per-client state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRequest {
    pub path: String,
    pub view_id: ImageId,
    pub points: Vec<PointJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub ok: bool,
    pub path: String,
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/views", get(list_views))
        .route("/api/image/{view_id}", get(view_image))
        .route("/api/propagate", post(propagate))
        .route("/api/mask", post(preview_mask))
        .route("/api/export", post(export))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(state: Arc<ServiceState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("annotation service on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn list_views(State(state): State<Arc<ServiceState>>) -> Json<Vec<ViewInfo>> {
    Json(
        state
            .views
            .iter()
            .map(|v| ViewInfo {
                view_id: v.view_id,
                name: v.name.clone(),
                width: v.width,
                height: v.height,
            })
            .collect(),
    )
}

async fn view_image(
    State(state): State<Arc<ServiceState>>,
    UrlPath(view_id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let id: ImageId = view_id
        .parse()
        .map_err(|_| ApiError::bad_request(format!("bad view id '{view_id}'")))?;
    let view = state.view(id)?;
    let path = view.image_path.as_ref().expect("service views carry image paths");
    let bytes = tokio::fs::read(path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

fn checked_points(req: &PointsRequest) -> Result<Vec<crate::geometry::Vec2>, ApiError> {
    if req.points.is_empty() {
        return Err(ApiError::bad_request("at least one point is required"));
    }
    if req.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(ApiError::bad_request("point coordinates must be finite"));
    }
    Ok(points_from_json(&req.points))
}

/// Library call behind `/api/propagate` and `/api/export`.
pub fn propagate_request(state: &ServiceState, req: &PointsRequest) -> Result<PromptSet, ApiError> {
    let view = state.view(req.view_id)?;
    let points = checked_points(req)?;
    let (set, _) = run_points_prompt(&state.model, state.predictor.as_ref(), view, &points)?;
    Ok(set)
}

async fn propagate(
    State(state): State<Arc<ServiceState>>,
    body: Result<Json<PointsRequest>, JsonRejection>,
) -> Result<Json<PropagateResponse>, ApiError> {
    let Json(req) = body?;
    let start = Instant::now();
    let set = tokio::task::spawn_blocking(move || propagate_request(&state, &req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(PropagateResponse {
        views: set
            .views
            .iter()
            .map(|v| ViewPoints {
                view_id: v.view_id,
                points: points_to_json(&v.points),
            })
            .collect(),
        dropped: set.diagnostics,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

async fn preview_mask(
    State(state): State<Arc<ServiceState>>,
    body: Result<Json<PointsRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, ApiError> {
        let view = state.view(req.view_id)?;
        let points = checked_points(&req)?;
        let mask = state.predictor.predict(view, &points)?;
        mask.check_dims(view.width, view.height)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, e.to_string()))?;
        Ok(mask.encode_png())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

/// `requested` resolved below `root`; absolute paths and `..` are refused.
pub fn confined_path(root: &Path, requested: &str) -> Result<PathBuf, String> {
    let rel = Path::new(requested);
    if requested.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(format!("export path '{requested}' must be relative and stay inside the output directory"));
    }
    Ok(root.join(rel))
}

async fn export(
    State(state): State<Arc<ServiceState>>,
    body: Result<Json<ExportRequest>, JsonRejection>,
) -> Result<Json<ExportResponse>, ApiError> {
    let Json(req) = body?;
    let mut target = confined_path(&state.export_dir, &req.path).map_err(ApiError::bad_request)?;
    if req.path.ends_with('/') || target.is_dir() {
        target = target.join("prompts.json");
    }
    let written = tokio::task::spawn_blocking(move || -> Result<PathBuf, ApiError> {
        let set = propagate_request(
            &state,
            &PointsRequest {
                view_id: req.view_id,
                points: req.points,
            },
        )?;
        let io = |e: std::io::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        set.save_json(&target).map_err(io)?;
        Ok(target)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(ExportResponse {
        ok: true,
        path: written.display().to_string(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_paths_are_confined() {
        let root = Path::new("/data/out");
        assert_eq!(confined_path(root, "prompts.json").unwrap(), root.join("prompts.json"));
        assert_eq!(confined_path(root, "a/b.json").unwrap(), root.join("a/b.json"));
        assert!(confined_path(root, "../x.json").is_err());
        assert!(confined_path(root, "a/../../x.json").is_err());
        assert!(confined_path(root, "/etc/passwd").is_err());
        assert!(confined_path(root, "").is_err());
    }
}
