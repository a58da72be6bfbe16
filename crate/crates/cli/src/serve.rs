//! HTTP endpoint for real-time recommendations.
//!
//! Every request reads an immutable model snapshot; `POST /admin/reload`
//! loads a fresh model from disk and swaps the snapshot pointer atomically.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::recommend::{LoadedModel, Query, RecommendError};

pub struct Snapshot {
    pub model: LoadedModel,
    pub version: String,
}

#[derive(Clone)]
pub struct AppState {
    current: Arc<RwLock<Arc<Snapshot>>>,
    model_path: Option<PathBuf>,
}

impl AppState {
    pub fn new(model: LoadedModel, version: String, model_path: Option<PathBuf>) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(Snapshot { model, version }))),
            model_path,
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }

    pub fn swap(&self, next: Snapshot) {
        *self.current.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(next);
    }
}

#[derive(Debug, Deserialize)]
pub struct RatingIn {
    pub item: u32,
    pub rating: f64,
}

#[derive(Debug, Deserialize)]
pub struct RecommendRequest {
    #[serde(default)]
    pub ratings: Vec<RatingIn>,
    pub age: u32,
    pub gender: String,
    pub occupation: String,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
}

fn default_top_n() -> usize {
    10
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoredItem {
    pub item: u32,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RecommendResponse {
    pub items: Vec<ScoredItem>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/recommend", post(recommend))
        .route("/admin/reload", post(reload))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_version": state.snapshot().version }))
}

async fn recommend(State(state): State<AppState>, body: Bytes) -> Response {
    let started = Instant::now();
    let response = handle_recommend(&state, &body);
    tracing::info!(
        status = response.status().as_u16(),
        latency_us = started.elapsed().as_micros() as u64,
        "recommend"
    );
    response
}

fn handle_recommend(state: &AppState, body: &[u8]) -> Response {
    let req: RecommendRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let query = Query {
        ratings: req.ratings.iter().map(|r| (r.item, r.rating)).collect(),
        age: req.age as f64,
        gender: req.gender,
        occupation: req.occupation,
        top_n: req.top_n,
    };
    let snapshot = state.snapshot();
    match snapshot.model.recommend(&query) {
        Ok(items) => Json(RecommendResponse {
            items: items
                .into_iter()
                .map(|(item, score)| ScoredItem { item, score })
                .collect(),
        })
        .into_response(),
        Err(RecommendError::Internal(detail)) => {
            tracing::error!(%detail, "inference failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        }
        Err(e) if e.is_malformed() => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

async fn reload(State(state): State<AppState>) -> Response {
    let Some(path) = state.model_path.clone() else {
        return error(StatusCode::CONFLICT, "no model path configured");
    };
    let loaded = tokio::task::spawn_blocking(move || LoadedModel::load(&path)).await;
    match loaded {
        Ok(Ok((model, version))) => {
            state.swap(Snapshot {
                model,
                version: version.clone(),
            });
            tracing::info!(%version, "model reloaded");
            Json(json!({ "status": "ok", "model_version": version })).into_response()
        }
        Ok(Err(e)) => {
            tracing::warn!(error = %e, "reload rejected");
            error(
                StatusCode::UNPROCESSABLE_ENTITY,
                "model file rejected; previous model kept",
            )
        }
        Err(e) => {
            tracing::error!(error = %e, "reload task failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        }
    }
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn run(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
