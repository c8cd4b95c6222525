//! HTTP and WebSocket API.
//!
//! | route | |
//! |---|---|
//! | `GET /api/snapshot` | latest [`Snapshot`], 503 before the first tick |
//! | `GET /api/thresholds` | operational [`ThresholdSet`] |
//! | `POST /api/whatif` | `{total_mw}` → plan and predicted angles |
//! | `GET /api/history?from&to` | ticks in `[from, to]`, microseconds |
//! | `WS /api/stream` | snapshot first, then one message per tick |

use std::sync::Arc;

use aam_core::mitigation::MitigationError;
use aam_core::netmodel::NetworkError;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::broadcast::error::RecvError;

use crate::pipeline::{Hub, ServerMessage, Snapshot, StreamEvent};
use crate::whatif::{WhatIf, WhatIfRequest, WhatIfResponse};

#[derive(Clone)]
pub struct AppState {
    pub hub: Arc<Hub>,
    pub whatif: Option<Arc<WhatIf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

fn error(code: StatusCode, msg: impl Into<String>) -> Response {
    (code, Json(ApiError { error: msg.into() })).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/snapshot", get(snapshot))
        .route("/api/thresholds", get(thresholds))
        .route("/api/whatif", post(whatif))
        .route("/api/history", get(history))
        .route("/api/stream", get(stream))
        .with_state(state)
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve_api<F>(listener: TcpListener, state: AppState, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn snapshot(State(s): State<AppState>) -> Response {
    match s.hub.snapshot() {
        Some(snap) => Json(&*snap).into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "no monitor tick yet"),
    }
}

async fn thresholds(State(s): State<AppState>) -> Response {
    Json(s.hub.thresholds()).into_response()
}

async fn whatif(State(s): State<AppState>, Json(req): Json<WhatIfRequest>) -> Response {
    let Some(ctx) = s.whatif.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded for what-if requests");
    };
    let result: Result<WhatIfResponse, MitigationError> =
        match tokio::task::spawn_blocking(move || ctx.run(req.total_mw)).await {
            Ok(r) => r,
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        };
    match result {
        Ok(r) => Json(r).into_response(),
        Err(e @ MitigationError::InvalidTotal(_)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(
            e @ (MitigationError::NoReceivingBuses
            | MitigationError::NoSources
            | MitigationError::Network(NetworkError::IslandedNetwork { .. })),
        ) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    from: Option<u64>,
    to: Option<u64>,
}

async fn history(State(s): State<AppState>, Query(q): Query<HistoryQuery>) -> Json<Vec<StreamEvent>> {
    Json(s.hub.history.range(q.from, q.to))
}

async fn stream(State(s): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| push_updates(socket, s.hub))
}

fn text(msg: &ServerMessage) -> Message {
    Message::Text(serde_json::to_string(msg).expect("messages serialize").into())
}

fn snapshot_message(snap: &Snapshot) -> Message {
    text(&ServerMessage::Snapshot(snap.clone()))
}

/// Snapshot, then ticks newer than it. A subscriber that falls behind gets
/// a fresh snapshot in place of the ticks it missed, so the stream stays
/// ordered and the latest state wins.
async fn push_updates(mut socket: WebSocket, hub: Arc<Hub>) {
    // subscribe before reading the snapshot so no tick falls in between
    let mut rx = hub.subscribe();
    let mut last = None;
    if let Some(snap) = hub.snapshot() {
        last = Some(snap.timestamp_us);
        if socket.send(snapshot_message(&snap)).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) => {
                    if last.is_some_and(|t| ev.timestamp_us <= t) {
                        continue;
                    }
                    last = Some(ev.timestamp_us);
                    if socket.send(text(&ServerMessage::Tick((*ev).clone()))).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) => {
                    if let Some(snap) = hub.snapshot() {
                        last = Some(snap.timestamp_us);
                        if socket.send(snapshot_message(&snap)).await.is_err() {
                            return;
                        }
                    }
                }
                Err(RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
