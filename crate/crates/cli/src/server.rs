//! HTTP JSON API over proofreading sessions.
//!
//! Grids travel as base64-encoded GRD1 files: scalar fields as f32, masks
//! as u8. Each case's session sits behind its own mutex, so decisions on
//! one case are serialized while other cases stay available.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use morseuq::grids::{save_binary, GridFile};
use morseuq::proofread::{ProofreadError, Session};
use morseuq::{BinaryGrid, Coord, ScalarGrid};

pub struct CaseEntry {
    pub id: String,
    pub image: ScalarGrid,
    pub likelihood: ScalarGrid,
    pub backbone: BinaryGrid,
    pub session: Mutex<Session>,
}

pub struct AppState {
    pub cases: Vec<CaseEntry>,
    pub export_dir: PathBuf,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/cases", get(list_cases))
        .route("/api/case/{id}", get(get_case))
        .route("/api/case/{id}/decision", post(post_decision))
        .route("/api/case/{id}/trace", get(get_trace))
        .route("/api/case/{id}/export", post(post_export))
        .with_state(state)
}

pub fn encode_scalar(g: &ScalarGrid) -> String {
    STANDARD.encode(GridFile::F32(g.cast()).to_bytes())
}

pub fn encode_mask(g: &BinaryGrid) -> String {
    STANDARD.encode(GridFile::U8(g.map(u8::from)).to_bytes())
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<ProofreadError> for ApiError {
    fn from(e: ProofreadError) -> Self {
        let status = match e {
            ProofreadError::UnknownStructure(_) => StatusCode::NOT_FOUND,
            ProofreadError::AlreadyDecided(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn find<'a>(state: &'a AppState, id: &str) -> Result<&'a CaseEntry, ApiError> {
    state
        .cases
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown case {id:?}")))
}

#[derive(Serialize)]
struct CaseSummary {
    id: String,
    dims: Vec<usize>,
}

async fn list_cases(State(state): State<Arc<AppState>>) -> Json<Vec<CaseSummary>> {
    Json(
        state
            .cases
            .iter()
            .map(|c| CaseSummary {
                id: c.id.clone(),
                dims: c.likelihood.dims().to_vec(),
            })
            .collect(),
    )
}

#[derive(Serialize)]
struct StructureView {
    id: usize,
    path: Vec<Coord>,
    p_bar: f64,
    var_bar: f64,
    u_norm: f64,
    /// Current flag, after any decision.
    accepted: bool,
}

async fn get_case(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let case = find(&state, &id)?;
    let s = case.session.lock().expect("session lock");
    let structures: Vec<StructureView> = s
        .estimates()
        .iter()
        .zip(s.accepted())
        .map(|(e, &accepted)| StructureView {
            id: e.structure_id,
            path: e.path.clone(),
            p_bar: e.p_bar,
            var_bar: e.var_bar,
            u_norm: e.u_norm,
            accepted,
        })
        .collect();
    Ok(Json(json!({
        "id": case.id,
        "dims": case.likelihood.dims(),
        "image": encode_scalar(&case.image),
        "likelihood": encode_scalar(&case.likelihood),
        "backbone_seg": encode_mask(&case.backbone),
        "final_mask": encode_mask(s.final_mask()),
        "final_mask_count": s.final_mask().count(),
        "skeletal_mask": encode_mask(&s.skeletal_mask()),
        "heatmap": encode_scalar(&s.heatmap()),
        "structures": structures,
        "pending": s.pending(),
        "trace": s.trace(),
    }))
    .into_response())
}

#[derive(Deserialize)]
struct DecisionRequest {
    structure_id: usize,
    accept: bool,
}

async fn post_decision(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> Result<Response, ApiError> {
    let case = find(&state, &id)?;
    let mut s = case.session.lock().expect("session lock");
    let point = s.apply_decision(req.structure_id, req.accept)?;
    Ok(Json(json!({
        "dice": point.dice,
        "cldice": point.cldice,
        "remaining": s.pending().len(),
    }))
    .into_response())
}

async fn get_trace(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let case = find(&state, &id)?;
    let s = case.session.lock().expect("session lock");
    Ok(Json(s.trace().to_vec()).into_response())
}

/// Writes the corrected mask (and the session state beside it).
async fn post_export(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let case = find(&state, &id)?;
    let s = case.session.lock().expect("session lock");
    let internal = |e: String| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e);
    std::fs::create_dir_all(&state.export_dir).map_err(|e| internal(e.to_string()))?;
    let path = state.export_dir.join(format!("{id}_corrected.grd"));
    save_binary(s.final_mask(), &path).map_err(|e| internal(e.to_string()))?;
    let session_path = state.export_dir.join(format!("{id}_session.json"));
    let body = serde_json::to_vec_pretty(&s.state()).map_err(|e| internal(e.to_string()))?;
    std::fs::write(&session_path, body).map_err(|e| internal(e.to_string()))?;
    Ok(Json(json!({ "path": path, "session": session_path })).into_response())
}
