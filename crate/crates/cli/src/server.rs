//! HTTP service behind the annotation UI.
//!
//! - `GET /tasks?evaluator=<id>`: tasks that evaluator has not answered
//! - `POST /responses`: one `AnnotationResponse`; 204, or 400 with
//!   `{"errors": [...]}`
//! - `GET /progress[?evaluator=<id>]`: `{"answered": n, "total": N}`

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mcle_core::annotation::{Progress, ResponseStore};
use mcle_core::AnnotationResponse;
use serde::Deserialize;

type Shared = Arc<Mutex<ResponseStore>>;

#[derive(Debug, Deserialize)]
pub struct EvaluatorQuery {
    pub evaluator: Option<String>,
}

pub fn router(store: ResponseStore) -> Router {
    Router::new()
        .route("/tasks", get(tasks))
        .route("/responses", post(submit))
        .route("/progress", get(progress))
        .with_state(Arc::new(Mutex::new(store)))
}

fn errors(status: StatusCode, list: Vec<String>) -> Response {
    (status, Json(serde_json::json!({ "errors": list }))).into_response()
}

async fn tasks(State(store): State<Shared>, Query(q): Query<EvaluatorQuery>) -> Response {
    let store = store.lock().expect("store lock");
    let list = match q.evaluator.as_deref() {
        Some(e) => store.pending_for(e),
        None => store.tasks().to_vec(),
    };
    Json(list).into_response()
}

async fn submit(State(store): State<Shared>, body: Bytes) -> Response {
    let r: AnnotationResponse = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return errors(StatusCode::BAD_REQUEST, vec![format!("body: {e}")]),
    };
    let mut store = store.lock().expect("store lock");
    let problems = store.problems(&r);
    if !problems.is_empty() {
        return errors(StatusCode::BAD_REQUEST, problems);
    }
    match store.submit(r) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => errors(StatusCode::INTERNAL_SERVER_ERROR, vec![e.to_string()]),
    }
}

async fn progress(State(store): State<Shared>, Query(q): Query<EvaluatorQuery>) -> Json<Progress> {
    Json(store.lock().expect("store lock").progress(q.evaluator.as_deref()))
}

/// Serves until the process is stopped.
pub async fn serve(store: ResponseStore, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store)).await?;
    Ok(())
}
