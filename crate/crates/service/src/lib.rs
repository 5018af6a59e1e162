//! HTTP front end for [`TriageEngine`].
//!
//! | route | body | reply |
//! |---|---|---|
//! | `POST /sessions` | optional `{"model_id": ..}` | `201 {session_id, model_id, status}` |
//! | `POST /sessions/{id}/stages/{k}` | `{"features": {name: number}, "request_token": ..}` | `{pi, label, action, status, ..}` |
//! | `GET /sessions/{id}` | | session snapshot with audit trail |
//! | `GET /model` | | stage inputs and probability cutoffs |
//!
//! Errors are `{code, message, detail}` with 404 for unknown ids, 409 for
//! out-of-order or closed sessions and 422 for malformed input.
//!
//! Sessions live in memory. With a snapshot path every accepted change is
//! written through to that file, and it is reloaded on start.

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use seqtriage_core::triage::{Decision, SessionStatus, TriageEngine, TriageError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, detail: Value) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                detail,
            },
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message, Value::Null)
    }
}

impl From<TriageError> for ApiError {
    fn from(e: TriageError) -> Self {
        let msg = e.to_string();
        match e {
            TriageError::UnknownModel(m) => Self::new(StatusCode::NOT_FOUND, "unknown_model", msg, json!({ "model_id": m })),
            TriageError::UnknownSession(s) => {
                Self::new(StatusCode::NOT_FOUND, "unknown_session", msg, json!({ "session_id": s }))
            }
            TriageError::OutOfOrder { expected, got } => Self::new(
                StatusCode::CONFLICT,
                "out_of_order",
                msg,
                json!({ "expected_stage": expected, "submitted_stage": got }),
            ),
            TriageError::Closed(status) => {
                Self::new(StatusCode::CONFLICT, "session_closed", msg, json!({ "status": status }))
            }
            TriageError::TokenReused { token, stage } => Self::new(
                StatusCode::CONFLICT,
                "token_reused",
                msg,
                json!({ "request_token": token, "stage": stage }),
            ),
            TriageError::Validation(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", msg, Value::Null),
            TriageError::Model(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "model", msg, Value::Null),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

struct AppState {
    engine: Arc<TriageEngine>,
    snapshot: Option<PathBuf>,
    snapshot_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    async fn persist(&self) {
        let Some(path) = &self.snapshot else { return };
        let _guard = self.snapshot_lock.lock().await;
        if let Err(e) = self.engine.save_snapshot(path) {
            log::error!("snapshot write failed: {e}");
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
    pub model_id: String,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReply {
    #[serde(flatten)]
    pub decision: Decision,
    pub status: SessionStatus,
}

fn parse_json(body: &Bytes) -> Result<Option<Value>, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(None);
    }
    serde_json::from_slice(body)
        .map(Some)
        .map_err(|e| ApiError::validation(format!("malformed JSON body: {e}")))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    let model_id = match parse_json(&body)? {
        None | Some(Value::Null) => None,
        Some(Value::Object(m)) => match m.get("model_id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(ApiError::validation("model_id must be a string")),
        },
        Some(_) => return Err(ApiError::validation("body must be a JSON object")),
    };
    let s = app.engine.create_session(model_id.as_deref())?;
    log::info!("session {} created", s.session_id);
    app.persist().await;
    Ok((
        StatusCode::CREATED,
        Json(CreatedSession {
            session_id: s.session_id,
            model_id: s.model_id,
            status: s.status,
        }),
    ))
}

/// Pulls `{features, request_token}` out of the body, reporting each
/// non-numeric feature by name.
fn parse_submission(body: &Bytes) -> Result<(BTreeMap<String, f64>, Option<String>), ApiError> {
    let Some(Value::Object(obj)) = parse_json(body)? else {
        return Err(ApiError::validation("body must be a JSON object with a features map"));
    };
    let token = match obj.get("request_token") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(ApiError::validation("request_token must be a string")),
    };
    let Some(Value::Object(raw)) = obj.get("features") else {
        return Err(ApiError::validation("features must be an object of name: number"));
    };
    let mut features = BTreeMap::new();
    let mut bad = Vec::new();
    for (k, v) in raw {
        match v.as_f64() {
            Some(x) => {
                features.insert(k.clone(), x);
            }
            None => bad.push(k.clone()),
        }
    }
    if !bad.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "validation",
            format!("non-numeric features: {}", bad.join(", ")),
            json!({ "non_numeric": bad }),
        ));
    }
    Ok((features, token))
}

async fn submit_stage(
    State(app): State<Arc<AppState>>,
    Path((id, stage)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<StageReply>, ApiError> {
    let stage: usize = stage
        .parse()
        .ok()
        .filter(|&k| k >= 1)
        .ok_or_else(|| ApiError::validation(format!("stage must be a positive integer, got {stage:?}")))?;
    let (features, token) = parse_submission(&body)?;
    let (decision, status) = app.engine.submit_stage(&id, stage, &features, token.as_deref())?;
    log::info!("session {id} stage {stage}: {} -> {status}", decision.action.as_str());
    app.persist().await;
    Ok(Json(StageReply { decision, status }))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(app.engine.get_session(&id)?).into_response())
}

async fn get_model(State(app): State<Arc<AppState>>) -> Response {
    Json(app.engine.describe_model()).into_response()
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route", Value::Null)
}

/// Builds the router. With `snapshot`, existing sessions are loaded from the
/// file (if present) and every accepted change is written back.
pub fn router(engine: Arc<TriageEngine>, snapshot: Option<PathBuf>) -> Result<Router, seqtriage_core::dataio::DataError> {
    if let Some(p) = &snapshot {
        if p.exists() {
            let n = engine.load_snapshot(p)?;
            log::info!("restored {n} sessions from {}", p.display());
        }
    }
    let state = Arc::new(AppState {
        engine,
        snapshot,
        snapshot_lock: tokio::sync::Mutex::new(()),
    });
    Ok(Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/stages/{k}", post(submit_stage))
        .route("/model", get(get_model))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(state))
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}");
    }
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
