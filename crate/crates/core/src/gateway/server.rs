//! Exposes a [`LanguageModel`] over the `/v1/*` wire protocol, plus a small
//! helper for running any axum router on a background thread.

use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::oneshot;

use super::{
    ClassifyRequest, ClassifyResponse, CompletionRequest, EmbedRequest, ErrorBody, ErrorResponse,
    FillMaskRequest, GatewayError, LanguageModel, ScoreRequest,
};

type Model = Arc<dyn LanguageModel>;

pub fn error_response(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    let body = ErrorResponse {
        error: ErrorBody {
            code: code.to_string(),
            message: message.into(),
        },
    };
    (status, Json(body)).into_response()
}

fn status_for(e: &GatewayError) -> StatusCode {
    match e {
        GatewayError::ContextOverflow { .. }
        | GatewayError::InvalidRequest(_)
        | GatewayError::EmptyInput
        | GatewayError::PositionOutOfRange { .. }
        | GatewayError::DimensionMismatch => StatusCode::BAD_REQUEST,
        GatewayError::CapabilityNotConfigured(_) => StatusCode::NOT_IMPLEMENTED,
        GatewayError::Transport { .. } => StatusCode::BAD_GATEWAY,
        GatewayError::Backend { .. } | GatewayError::InvalidResponse(_) => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

async fn dispatch<T, R>(
    model: Model,
    payload: Result<Json<T>, JsonRejection>,
    call: fn(&dyn LanguageModel, T) -> Result<R, GatewayError>,
) -> Response
where
    T: DeserializeOwned + Send + 'static,
    R: Serialize + Send + 'static,
{
    let Json(req) = match payload {
        Ok(p) => p,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()),
    };
    let out = tokio::task::spawn_blocking(move || call(model.as_ref(), req)).await;
    match out {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(status_for(&e), e.code(), e.to_string()),
        Err(e) => error_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            "backend_error",
            e.to_string(),
        ),
    }
}

async fn complete(
    State(m): State<Model>,
    p: Result<Json<CompletionRequest>, JsonRejection>,
) -> Response {
    dispatch(m, p, |m, r| m.complete(&r)).await
}

async fn score(State(m): State<Model>, p: Result<Json<ScoreRequest>, JsonRejection>) -> Response {
    dispatch(m, p, |m, r| m.score(&r.text)).await
}

async fn fill_mask(
    State(m): State<Model>,
    p: Result<Json<FillMaskRequest>, JsonRejection>,
) -> Response {
    dispatch(m, p, |m, r| m.fill_mask(&r)).await
}

async fn embed(State(m): State<Model>, p: Result<Json<EmbedRequest>, JsonRejection>) -> Response {
    dispatch(m, p, |m, r| m.embed(&r)).await
}

async fn classify(
    State(m): State<Model>,
    p: Result<Json<ClassifyRequest>, JsonRejection>,
) -> Response {
    dispatch(m, p, |m, r| {
        m.classify(&r.text, r.task)
            .map(|prob| ClassifyResponse { prob })
    })
    .await
}

pub fn router(model: Model) -> Router {
    Router::new()
        .route("/v1/complete", post(complete))
        .route("/v1/score", post(score))
        .route("/v1/fill_mask", post(fill_mask))
        .route("/v1/embed", post(embed))
        .route("/v1/classify", post(classify))
        .with_state(model)
}

/// A router served on a dedicated thread; dropping the handle shuts the
/// server down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server exits.
    pub fn wait(mut self) -> io::Result<()> {
        self.shutdown.take();
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `app` until the
/// handle is dropped.
pub fn spawn(app: Router, addr: SocketAddr) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || -> io::Result<()> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    // a dropped sender (see `wait`) means serve forever
                    if rx.await.is_err() {
                        std::future::pending::<()>().await;
                    }
                })
                .await
        })
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves the wire protocol for `model` on a background thread.
pub fn spawn_model(model: Model, addr: SocketAddr) -> io::Result<ServerHandle> {
    spawn(router(model), addr)
}
