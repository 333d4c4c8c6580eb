// SPDX-License-Identifier: Apache-2.0

use std::future::Future;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use teeinfer::attestation::{Attester, HandshakeMessage};
use teeinfer::keyservice::{keyservice_measurement, KeyService, KsServer, Route, TransportError};

use super::http::{ErrorBody, HelloReply, SESSION_HEADER};
use super::{serve_on, Health, LiveConfig};

pub fn build(cfg: &LiveConfig) -> Result<Arc<KeyService>> {
    let platform = cfg.platform();
    let attester = Attester::new(platform.clone(), keyservice_measurement());
    Ok(Arc::new(match &cfg.keyservice.journal {
        Some(path) => {
            if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d)?;
            }
            KeyService::with_journal(attester, platform.verifier(), path).with_context(|| format!("journal {}", path.display()))?
        }
        None => KeyService::new(attester, platform.verifier()),
    }))
}

fn error(e: TransportError) -> Response {
    let (status, body) = ErrorBody::of(&e);
    (StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_REQUEST), Json(body)).into_response()
}

fn session(h: &HeaderMap) -> Result<String, Response> {
    h.get(SESSION_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
        .ok_or_else(|| error(TransportError::UnknownSession))
}

fn parse_hello(body: &[u8]) -> Result<HandshakeMessage, Response> {
    let s = std::str::from_utf8(body).map_err(|e| error(TransportError::Rejected(e.to_string())))?;
    HandshakeMessage::from_json(s).map_err(|e| error(e.into()))
}

async fn hello(State(s): State<Arc<KsServer>>, body: Bytes) -> Response {
    let msg = match parse_hello(&body) {
        Ok(m) => m,
        Err(r) => return r,
    };
    match s.hello(&msg) {
        Ok((session, reply)) => Json(HelloReply { session, reply }).into_response(),
        Err(e) => error(e),
    }
}

async fn finish(State(s): State<Arc<KsServer>>, headers: HeaderMap, body: Bytes) -> Response {
    let (id, msg) = match session(&headers).and_then(|id| parse_hello(&body).map(|m| (id, m))) {
        Ok(v) => v,
        Err(r) => return r,
    };
    match s.finish(&id, &msg) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => error(e),
    }
}

fn call(s: &KsServer, headers: &HeaderMap, route: Route, body: &[u8]) -> Response {
    let id = match session(headers) {
        Ok(id) => id,
        Err(r) => return r,
    };
    match s.call(&id, route, body) {
        Ok(reply) => ([("content-type", "application/octet-stream")], reply).into_response(),
        Err(e) => error(e),
    }
}

pub fn app(server: Arc<KsServer>) -> Router {
    let m = server.service().measurement().to_hex();
    let mut r = Router::new()
        .route(
            "/health",
            get(move || {
                let m = m.clone();
                async move { Json(Health { role: "keyservice".into(), measurement: Some(m) }) }
            }),
        )
        .route("/handshake/hello", post(hello))
        .route("/handshake/finish", post(finish));
    for route in [Route::Register, Route::ModelKey, Route::Grant, Route::ReqKey, Route::Provision] {
        r = r.route(
            route.path(),
            post(move |State(s): State<Arc<KsServer>>, h: HeaderMap, body: Bytes| async move { call(&s, &h, route, &body) }),
        );
    }
    r.with_state(server)
}

/// Serves until `shutdown`, then flushes the journal.
pub async fn run(cfg: &LiveConfig, listener: tokio::net::TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let ks = build(cfg)?;
    let server = Arc::new(KsServer::new(ks.clone()));
    tracing::info!(addr = %listener.local_addr()?, measurement = %ks.measurement().to_hex(), "key service listening");
    serve_on(listener, app(server), shutdown).await?;
    ks.flush()?;
    tracing::info!(provisioning_calls = ks.provision_calls(), "key service stopped");
    Ok(())
}
