//! JSON API over an [`EvalStore`].
//!
//! ```text
//! POST /sessions                         CreateSession -> SessionSummary
//! GET  /sessions                         -> [session_id]
//! GET  /sessions/{id}/next?annotator=a   -> NextResponse
//! POST /sessions/{id}/submit             {annotator, item_id, responses} -> SubmitAck
//! GET  /sessions/{id}/report?partial=1   -> Report
//! ```

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CreateSession, EvalError, EvalStore};
use crate::gateway::server::error_response;

type Store = Arc<EvalStore>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub annotator: String,
    pub item_id: String,
    pub responses: Value,
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
}

#[derive(Debug, Deserialize)]
struct ReportQuery {
    #[serde(default)]
    partial: Option<String>,
}

fn status_for(e: &EvalError) -> StatusCode {
    match e {
        EvalError::UnknownSession(_)
        | EvalError::UnknownAnnotator { .. }
        | EvalError::UnknownItem { .. } => StatusCode::NOT_FOUND,
        EvalError::Duplicate { .. } | EvalError::Incomplete { .. } | EvalError::EmptySession(_) => {
            StatusCode::CONFLICT
        }
        EvalError::InvalidResponse(_)
        | EvalError::Misaligned(_)
        | EvalError::NotEnoughItems { .. }
        | EvalError::InvalidSession(_) => StatusCode::BAD_REQUEST,
        EvalError::Io { .. } | EvalError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn run<R, F>(store: Store, ok: StatusCode, f: F) -> Response
where
    R: Serialize + Send + 'static,
    F: FnOnce(&EvalStore) -> Result<R, EvalError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&store)).await {
        Ok(Ok(v)) => (ok, Json(v)).into_response(),
        Ok(Err(e)) => error_response(status_for(&e), e.code(), e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

async fn create(
    State(store): State<Store>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Response {
    match body {
        Ok(Json(req)) => run(store, StatusCode::CREATED, move |s| s.create(&req)).await,
        Err(e) => error_response(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()),
    }
}

async fn list(State(store): State<Store>) -> Response {
    run(store, StatusCode::OK, |s| Ok(s.session_ids())).await
}

async fn next(
    State(store): State<Store>,
    Path(id): Path<String>,
    q: Result<Query<NextQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    match q {
        Ok(Query(q)) => run(store, StatusCode::OK, move |s| s.next(&id, &q.annotator)).await,
        Err(e) => error_response(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()),
    }
}

async fn submit(
    State(store): State<Store>,
    Path(id): Path<String>,
    body: Result<Json<SubmitRequest>, JsonRejection>,
) -> Response {
    match body {
        Ok(Json(r)) => {
            run(store, StatusCode::OK, move |s| {
                s.submit(&id, &r.annotator, &r.item_id, &r.responses)
            })
            .await
        }
        Err(e) => error_response(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()),
    }
}

async fn report(
    State(store): State<Store>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> Response {
    let partial = matches!(q.partial.as_deref(), Some("1" | "true" | "yes"));
    run(store, StatusCode::OK, move |s| s.report(&id, partial)).await
}

pub fn router(store: Store) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/submit", post(submit))
        .route("/sessions/{id}/report", get(report))
        .with_state(store)
}
