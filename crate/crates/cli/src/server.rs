//! HTTP API over the store: verification queue, dialogues, reports, runs.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dialforge::dialogue::Dialogue;
use dialforge::metrics::dataset_stats;
use dialforge::refinery::DatasetRecord;
use dialforge::store::{self, Decision, Store, StoreError, VerificationStatus};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::commands::REPORTS_DIR;

pub struct AppState {
    pub store: Store,
    pub reports_dir: PathBuf,
}

pub fn router(store: Store) -> Router {
    let reports_dir = store.root().join(REPORTS_DIR);
    let state = Arc::new(AppState { store, reports_dir });
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/dialogues/{id}", get(dialogue))
        .route("/api/verdict", post(verdict))
        .route("/api/reports/{kind}", get(report))
        .route("/api/runs", get(runs))
        .with_state(state)
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Conflict { .. } => StatusCode::CONFLICT,
            StoreError::InvalidVerdict(_) | StoreError::InvalidStream(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

/// Runs store I/O off the async workers.
async fn blocking<F>(state: Arc<AppState>, f: F) -> ApiResult
where
    F: FnOnce(&AppState) -> Result<Value, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
}

#[derive(Deserialize)]
struct QueueQuery {
    status: Option<String>,
}

fn parse_status(raw: &str) -> Result<VerificationStatus, ApiError> {
    serde_json::from_value(Value::String(raw.to_string()))
        .map_err(|_| ApiError(StatusCode::BAD_REQUEST, format!("unknown status {raw:?}")))
}

async fn queue(State(state): State<Arc<AppState>>, Query(q): Query<QueueQuery>) -> ApiResult {
    let status = q.status.as_deref().map(parse_status).transpose()?;
    blocking(state, move |s| {
        let items = s.store.queue(status)?;
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            let dialogue: Option<Dialogue> = s.store.get(store::DIALOGUES, &item.dialogue_id)?;
            let current: Option<DatasetRecord> = s.store.get(store::DATASET, &item.record_id)?;
            let mut v = serde_json::to_value(&item).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            v["dialogue"] = json!(dialogue);
            v["current_task"] = json!(current);
            out.push(v);
        }
        Ok(Value::Array(out))
    })
    .await
}

async fn dialogue(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    blocking(state, move |s| {
        let d: Dialogue = s
            .store
            .get(store::DIALOGUES, &id)?
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no dialogue {id}")))?;
        Ok(json!(d))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictBody {
    item_id: String,
    decision: Decision,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    note: Option<String>,
}

async fn verdict(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let body: VerdictBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid verdict body: {e}")))?;
    blocking(state, move |s| {
        let item = s.store.verdict(&body.item_id, body.decision, body.label, body.note)?;
        Ok(json!(item))
    })
    .await
}

async fn report(State(state): State<Arc<AppState>>, Path(kind): Path<String>) -> ApiResult {
    if !matches!(kind.as_str(), "stats" | "similarity" | "topics") {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown report {kind:?}")));
    }
    blocking(state, move |s| {
        if kind == "stats" {
            let dialogues: Vec<Dialogue> = s.store.load(store::DIALOGUES)?;
            if !dialogues.is_empty() {
                let r = dataset_stats(&dialogues).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
                return Ok(json!(r));
            }
        }
        let path = s.reports_dir.join(format!("{kind}.json"));
        let text = std::fs::read_to_string(&path)
            .map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("no {kind} report yet; run the report command")))?;
        serde_json::from_str(&text).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    })
    .await
}

async fn runs(State(state): State<Arc<AppState>>) -> ApiResult {
    blocking(state, |s| Ok(Value::Array(s.store.load_values(store::RUNS)?))).await
}

pub async fn serve(store: Store, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
