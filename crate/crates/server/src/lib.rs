//! HTTP front end for a running engine.
//!
//! | route            | response                                      |
//! |------------------|-----------------------------------------------|
//! | `GET /events`    | server-sent events, one frame per engine event |
//! | `POST /control`  | JSON command in, [`ControlReply`] out          |
//! | `GET /snapshot`  | latest snapshot, CMX1 binary or `?format=json` |
//! | `GET /healthz`   | engine counters                                |
//!
//! The server only talks to the engine through [`EngineLinks`], so it never
//! blocks the tick loop: events arrive through a bounded per-client queue and
//! commands are queued for the tick driver.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cmx_core::engine::control::{ControlCommand, ControlError, ControlReply};
use cmx_core::engine::events::Event;
use cmx_core::engine::publisher::{Delivery, EventSink};
use cmx_core::engine::EngineLinks;
use futures::Stream;
use serde::Deserialize;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

/// How long `POST /control` waits for the tick driver to apply a command.
pub const CONTROL_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server runtime: {0}")]
    Runtime(#[from] std::io::Error),
}

/// Forwards events into a tokio channel feeding one SSE response.
struct ChannelSink {
    tx: mpsc::Sender<Event>,
}

impl EventSink for ChannelSink {
    fn offer(&mut self, event: &Event) -> Delivery {
        match self.tx.try_send(event.clone()) {
            Ok(()) => Delivery::Accepted,
            Err(mpsc::error::TrySendError::Full(_)) => Delivery::Full,
            Err(mpsc::error::TrySendError::Closed(_)) => Delivery::Closed,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Directory of static files served for any other path.
    pub static_dir: Option<PathBuf>,
}

pub fn router(links: EngineLinks, opts: &ServerOptions) -> Router {
    let app = Router::new()
        .route("/events", get(events))
        .route("/control", post(control))
        .route("/snapshot", get(snapshot))
        .route("/healthz", get(healthz))
        .with_state(links);
    let app = match &opts.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    app.layer(CorsLayer::permissive())
}

async fn events(State(links): State<EngineLinks>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let (tx, rx) = mpsc::channel(links.publisher.queue_depth());
    let id = links.publisher.add_sink(Box::new(ChannelSink { tx }));
    log::debug!("sse subscriber {id} connected");
    // the stream ends when the publisher drops the sink, closing the response
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let ev = rx.recv().await?;
        let frame = SseEvent::default()
            .event(ev.kind.as_str())
            .id(ev.tick.to_string())
            .data(&*ev.data);
        Some((Ok(frame), rx))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

fn control_failure(status: StatusCode, error: ControlError) -> Response {
    let body = serde_json::json!({ "ok": false, "error": error });
    (status, Json(body)).into_response()
}

async fn control(State(links): State<EngineLinks>, body: Bytes) -> Response {
    let command: ControlCommand = match serde_json::from_slice(&body) {
        Ok(c) => c,
        Err(e) => return control_failure(StatusCode::BAD_REQUEST, ControlError::InvalidCommand(e.to_string())),
    };
    let (tx, rx) = oneshot::channel::<ControlReply>();
    let reply = Box::new(move |r| {
        let _ = tx.send(r);
    });
    if let Err(e) = links.control.submit(command, Some(reply)) {
        return control_failure(StatusCode::SERVICE_UNAVAILABLE, e);
    }
    match tokio::time::timeout(CONTROL_TIMEOUT, rx).await {
        Ok(Ok(reply)) => {
            let status = match &reply.error {
                None => StatusCode::OK,
                Some(_) => StatusCode::UNPROCESSABLE_ENTITY,
            };
            (status, Json(reply)).into_response()
        }
        Ok(Err(_)) => control_failure(StatusCode::SERVICE_UNAVAILABLE, ControlError::EngineStopped),
        Err(_) => control_failure(
            StatusCode::GATEWAY_TIMEOUT,
            ControlError::InvalidCommand("engine did not apply the command in time".into()),
        ),
    }
}

#[derive(Debug, Deserialize)]
struct SnapshotQuery {
    format: Option<String>,
}

async fn snapshot(State(links): State<EngineLinks>, Query(q): Query<SnapshotQuery>) -> Response {
    let latest = links.snapshot.read().unwrap().clone();
    let Some(snap) = latest else {
        return (StatusCode::NOT_FOUND, "no snapshot yet\n").into_response();
    };
    match q.format.as_deref() {
        None | Some("cmx") | Some("binary") => {
            ([(header::CONTENT_TYPE, "application/octet-stream")], snap.encode()).into_response()
        }
        Some("json") => Json(&*snap).into_response(),
        Some(other) => (StatusCode::BAD_REQUEST, format!("unknown format {other:?}\n")).into_response(),
    }
}

async fn healthz(State(links): State<EngineLinks>) -> Json<serde_json::Value> {
    Json(links.status.to_json())
}

/// Grace period for open connections once shutdown is requested.
pub const SHUTDOWN_GRACE: Duration = Duration::from_secs(2);

/// A server running on its own tokio runtime.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<Result<(), std::io::Error>>>,
    runtime: Option<tokio::runtime::Runtime>,
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle").field("addr", &self.addr).finish()
    }
}

impl ServerHandle {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(addr: SocketAddr, links: EngineLinks, opts: ServerOptions) -> Result<Self, ServerError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("cmx-http")
            .enable_all()
            .build()?;
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind(addr))
            .map_err(|source| ServerError::Bind { addr, source })?;
        let bound = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(links, &opts);
        let task = runtime.spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await
        });
        log::info!("listening on http://{bound}");
        Ok(Self {
            addr: bound,
            shutdown: Some(tx),
            task: Some(task),
            runtime: Some(runtime),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// URL of the event stream.
    pub fn events_url(&self) -> String {
        format!("http://{}/events", self.addr)
    }

    /// Stops accepting connections, gives open ones [`SHUTDOWN_GRACE`] to
    /// finish, then drops the rest.
    pub fn shutdown(mut self) -> Result<(), ServerError> {
        self.stop()
    }

    fn stop(&mut self) -> Result<(), ServerError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let (Some(runtime), Some(task)) = (self.runtime.take(), self.task.take()) else {
            return Ok(());
        };
        let outcome = runtime.block_on(async { tokio::time::timeout(SHUTDOWN_GRACE, task).await });
        // an SSE client that never reads keeps its connection open; cut it
        runtime.shutdown_background();
        match outcome {
            Ok(Ok(r)) => r.map_err(ServerError::from),
            Ok(Err(e)) => Err(ServerError::Runtime(std::io::Error::other(e))),
            Err(_) => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}
