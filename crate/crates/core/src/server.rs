//! HTTP front end for a [`Proxy`].
//!
//! Bodies are key-value records (see [`crate::kv`]). Routes:
//!
//! - `POST /query`: `tool` and `text`, optional `session` and `context`, or a
//!   single `agent_output` field whose tool tags are parsed and served in
//!   order. Answers one record per call.
//! - `GET /stats`: counters, cache and ledger totals.
//! - `POST /admin/recalibrate`: runs threshold recalibration.
//! - `POST /admin/snapshot`: persists the cache, optional `dir`.
//!
//! Proxy work blocks (remote fetches, judge calls), so every handler runs on
//! the blocking pool behind a semaphore sized to the worker count.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::Router;
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::kv::{encode_all, Record};
use crate::proxy::{Proxy, ProxyConfig, ProxyError, ToolCall};

const DEFAULT_SESSION: &str = "default";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
struct AppState {
    proxy: Arc<Proxy>,
    workers: Arc<Semaphore>,
}

type Reply = (StatusCode, String);

fn error_reply(status: StatusCode, message: impl ToString) -> Reply {
    (status, Record::new().with("error", message.to_string()).encode())
}

fn status_for(e: &ProxyError) -> StatusCode {
    match e {
        ProxyError::UnknownTool(_) | ProxyError::Model(_) | ProxyError::Config(_) => StatusCode::BAD_REQUEST,
        ProxyError::Fetch(_) => StatusCode::BAD_GATEWAY,
        ProxyError::NoGroundTruth => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// Runs `f` on the blocking pool once a worker slot is free.
async fn blocking<F>(state: &AppState, f: F) -> Reply
where
    F: FnOnce(&Proxy) -> Reply + Send + 'static,
{
    let Ok(_permit) = state.workers.clone().acquire_owned().await else {
        return error_reply(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
    };
    let proxy = state.proxy.clone();
    match tokio::task::spawn_blocking(move || f(&proxy)).await {
        Ok(reply) => reply,
        Err(e) => error_reply(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

fn query(proxy: &Proxy, body: &str) -> Reply {
    let record = match Record::decode(body) {
        Ok(r) => r,
        Err(e) => return error_reply(StatusCode::BAD_REQUEST, e),
    };
    let session = record.get("session").unwrap_or(DEFAULT_SESSION).to_string();
    let calls = if let Some(output) = record.get("agent_output") {
        let parsed = proxy.parse(output);
        if parsed.calls.is_empty() {
            let reason = parsed
                .diagnostics
                .first()
                .map(|d| d.message.clone())
                .unwrap_or_else(|| "no tool call found".into());
            return error_reply(StatusCode::BAD_REQUEST, reason);
        }
        parsed.calls
    } else {
        let (Some(tool), Some(text)) = (record.get("tool"), record.get("text")) else {
            return error_reply(StatusCode::BAD_REQUEST, "need `tool` and `text`, or `agent_output`");
        };
        vec![ToolCall {
            tool: tool.to_string(),
            query_text: text.to_string(),
            raw_span: 0..0,
            context: record.get("context").map(str::to_string),
        }]
    };
    let mut out = Vec::with_capacity(calls.len());
    for call in &calls {
        match proxy.handle(call, &session) {
            Ok(r) => out.push(r.to_record().with("tool", &call.tool)),
            Err(e) => return error_reply(status_for(&e), e),
        }
    }
    (StatusCode::OK, encode_all(&out))
}

fn recalibrate(proxy: &Proxy) -> Reply {
    match proxy.recalibrate() {
        Ok(r) => (
            StatusCode::OK,
            Record::new()
                .with("tau_lsm", r.threshold.value)
                .with("feasible", r.threshold.feasible)
                .with("sampled", r.sampled)
                .with("dropped", r.dropped)
                .with("validation_size", r.validation_size)
                .encode(),
        ),
        Err(e) => error_reply(status_for(&e), e),
    }
}

fn snapshot(proxy: &Proxy, body: &str) -> Reply {
    let dir = match Record::decode(body) {
        Ok(r) => r.get("dir").map(PathBuf::from),
        Err(e) => return error_reply(StatusCode::BAD_REQUEST, e),
    };
    match proxy.snapshot(dir.as_deref()) {
        Ok(path) => (
            StatusCode::OK,
            Record::new().with("dir", path.display()).encode(),
        ),
        Err(e) => error_reply(status_for(&e), e),
    }
}

/// The route table over a shared proxy with `workers` concurrent handlers.
pub fn router(proxy: Arc<Proxy>, workers: usize) -> Router {
    let state = AppState {
        proxy,
        workers: Arc::new(Semaphore::new(workers.max(1))),
    };
    Router::new()
        .route(
            "/query",
            post(|State(s): State<AppState>, body: String| async move { blocking(&s, move |p| query(p, &body)).await }),
        )
        .route(
            "/stats",
            get(|State(s): State<AppState>| async move {
                blocking(&s, |p| (StatusCode::OK, p.stats_record().encode())).await
            }),
        )
        .route(
            "/admin/recalibrate",
            post(|State(s): State<AppState>| async move { blocking(&s, recalibrate).await }),
        )
        .route(
            "/admin/snapshot",
            post(|State(s): State<AppState>, body: String| async move {
                blocking(&s, move |p| snapshot(p, &body)).await
            }),
        )
        .with_state(state)
}

/// Serves on `listener` until `shutdown` resolves, then stops accepting and
/// waits for in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    proxy: Arc<Proxy>,
    workers: usize,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    axum::serve(listener, router(proxy, workers))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

/// Builds the proxy from `config`, binds its address and serves until
/// Ctrl-C.
pub fn serve_api(config: &ProxyConfig) -> Result<(), ServerError> {
    let proxy = Arc::new(Proxy::from_config(config)?);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let addr = format!("{}:{}", config.bind, config.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|source| ServerError::Bind { addr: addr.clone(), source })?;
        let local: SocketAddr = listener.local_addr()?;
        tracing::info!(%local, workers = config.workers, "serving");
        serve(listener, proxy, config.workers, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
    })
}
