//! HTTP service for live annotation sessions.
//!
//! Endpoints:
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | create a session; the initial set is its first batch |
//! | GET | `/sessions/{id}/batch` | labels still wanted |
//! | POST | `/sessions/{id}/labels` | submit labels (partial batches allowed) |
//! | GET | `/sessions/{id}/status` | progress and stopping state |
//! | GET | `/sessions/{id}/export` | labeled LIBSVM, model and run trace |
//! | GET | `/health` | service metadata |
//!
//! Every session is backed by an append-only JSONL event log in the state
//! directory and is rebuilt from it when the service starts.

pub mod api;
pub mod error;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use api::{BatchResponse, CreateSession, ExportResponse, StatusResponse, SubmitLabels, SubmitResponse};
use error::ApiError;
use session::Session;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Where session event logs live; `None` keeps sessions in memory only.
    pub state_dir: Option<PathBuf>,
    /// Static files served at `/` (the annotation UI).
    pub ui_dir: Option<PathBuf>,
    /// Default for sessions that do not set `halt_on_stop` themselves.
    pub halt_on_stop: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self::new(None)
    }
}

impl ServiceConfig {
    pub fn new(state_dir: Option<PathBuf>) -> Self {
        Self {
            state_dir,
            ui_dir: None,
            halt_on_stop: true,
        }
    }
}

#[derive(Debug)]
pub struct AppState {
    config: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
}

impl AppState {
    /// Creates the state directory if needed and replays every session log
    /// found in it. Logs that cannot be replayed are reported and skipped.
    pub fn open(config: ServiceConfig) -> std::io::Result<Self> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &config.state_dir {
            std::fs::create_dir_all(dir)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            paths.sort();
            for path in paths {
                match Session::replay(&path) {
                    Ok(s) => {
                        log::info!("recovered session {}", s.id);
                        sessions.insert(s.id.clone(), Arc::new(s));
                    }
                    Err(e) => log::error!("cannot recover {}: {e}", path.display()),
                }
            }
        }
        Ok(Self {
            config,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn state_dir(&self) -> Option<&Path> {
        self.config.state_dir.as_deref()
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .expect("lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

type Shared = Arc<AppState>;

async fn create_session(
    State(app): State<Shared>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<BatchResponse>), ApiError> {
    let Json(req) = body?;
    let app2 = app.clone();
    let session = tokio::task::spawn_blocking(move || {
        let stop = req.stop.unwrap_or_default();
        let halt = app2.config.halt_on_stop;
        Session::create(req.dataset, req.texts, &req.al, halt, stop, app2.state_dir())
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let session = Arc::new(session);
    app.sessions
        .write()
        .expect("lock")
        .insert(session.id.clone(), session.clone());
    Ok((StatusCode::CREATED, Json(session.batch().await)))
}

async fn get_batch(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<BatchResponse>, ApiError> {
    Ok(Json(app.session(&id)?.batch().await))
}

async fn submit_labels(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<SubmitLabels>, JsonRejection>,
) -> Result<Json<SubmitResponse>, ApiError> {
    let session = app.session(&id)?;
    let Json(req) = body?;
    let (resp, due) = session.submit(req.labels).await?;
    if due {
        tokio::spawn(session.train());
    }
    Ok(Json(resp))
}

async fn get_status(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<StatusResponse>, ApiError> {
    Ok(Json(app.session(&id)?.status().await))
}

async fn export(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ExportResponse>, ApiError> {
    Ok(Json(app.session(&id)?.export().await))
}

async fn health(State(app): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "service": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "sessions": app.sessions.read().expect("lock").len(),
        "persistent": app.config.state_dir.is_some(),
    }))
}

pub fn router(app: Shared) -> Router {
    let ui = app.config.ui_dir.clone();
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/batch", get(get_batch))
        .route("/sessions/{id}/labels", post(submit_labels))
        .route("/sessions/{id}/status", get(get_status))
        .route("/sessions/{id}/export", get(export))
        .with_state(app);
    match ui {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let app = Arc::new(tokio::task::spawn_blocking(move || AppState::open(config)).await??);
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
