// SPDX-License-Identifier: Apache-2.0

//! HTTP front end that routes `/run` calls across worker endpoints with
//! the FnPacker policy.

use std::collections::BTreeSet;
use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use teeinfer::runtime::{RunRequest, RunResponse};
use teeinfer_sim::clock::Micros;
use teeinfer_sim::fnpacker::{EndpointStats, FnPacker, FnPool, RouterConfig};

use super::worker::ActionError;
use super::{serve_on, Health, LiveConfig};

pub struct Gateway {
    packer: Mutex<FnPacker>,
    initialized: Mutex<BTreeSet<String>>,
    http: reqwest::Client,
    started: Instant,
}

impl Gateway {
    pub fn new(cfg: &LiveConfig) -> Result<Self> {
        let s = &cfg.fnpacker;
        let mut packer = FnPacker::new(RouterConfig::default());
        packer.deploy_pool(FnPool {
            pool_id: "live".into(),
            models: s.models.iter().cloned().collect(),
            memory_budget_mb: s.memory_budget_mb,
            endpoints: s.endpoints.iter().map(|e| e.trim_end_matches('/').to_owned()).collect(),
        })?;
        let http = reqwest::Client::builder().timeout(Duration::from_secs(60)).build().context("http client")?;
        Ok(Gateway { packer: Mutex::new(packer), initialized: Mutex::new(BTreeSet::new()), http, started: Instant::now() })
    }

    fn now(&self) -> Micros {
        self.started.elapsed().as_micros() as Micros
    }

    fn packer(&self) -> std::sync::MutexGuard<'_, FnPacker> {
        self.packer.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn endpoint_stats(&self) -> Vec<EndpointStats> {
        self.packer().endpoint_stats()
    }

    /// Workers are initialized once, on first use.
    async fn ensure_init(&self, endpoint: &str) -> Result<(), String> {
        if self.initialized.lock().unwrap_or_else(|e| e.into_inner()).contains(endpoint) {
            return Ok(());
        }
        let r = self.http.post(format!("{endpoint}/init")).send().await.map_err(|e| e.to_string())?;
        if !r.status().is_success() {
            return Err(format!("{endpoint}/init: http {}", r.status()));
        }
        self.initialized.lock().unwrap_or_else(|e| e.into_inner()).insert(endpoint.to_owned());
        Ok(())
    }

    async fn forward(&self, endpoint: &str, body: Bytes) -> Result<(StatusCode, Bytes), String> {
        self.ensure_init(endpoint).await?;
        let r = self
            .http
            .post(format!("{endpoint}/run"))
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let status = StatusCode::from_u16(r.status().as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
        Ok((status, r.bytes().await.map_err(|e| e.to_string())?))
    }
}

fn reject(status: StatusCode, error: impl ToString) -> Response {
    (status, Json(ActionError { error: error.to_string() })).into_response()
}

async fn run(State(g): State<Arc<Gateway>>, body: Bytes) -> Response {
    let req: RunRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, e),
    };
    let model = req.model_id;
    let t0 = g.now();
    let endpoint = match g.packer().route(&model, t0) {
        Ok(e) => e,
        Err(e) => return reject(StatusCode::NOT_FOUND, e),
    };
    let result = g.forward(&endpoint, body).await;
    let t1 = g.now();
    let parsed = match &result {
        Ok((s, b)) if s.is_success() => serde_json::from_slice::<RunResponse>(b).ok(),
        _ => None,
    };
    let accounted = match &parsed {
        Some(r) => g.packer().complete(&model, &endpoint, (t1 - t0) as f64 / 1000.0, r.path, t1),
        None => g.packer().abandon(&model, &endpoint),
    };
    if let Err(e) = accounted {
        tracing::warn!(error = %e, "router accounting mismatch");
    }
    tracing::debug!(model = %model, endpoint = %endpoint, path = ?parsed.as_ref().map(|r| r.path), "routed");
    match result {
        Ok((status, bytes)) => (status, [("content-type", "application/json")], bytes).into_response(),
        Err(e) => reject(StatusCode::BAD_GATEWAY, e),
    }
}

pub fn app(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(Health { role: "fnpacker".into(), measurement: None }) }))
        .route("/stats", get(|State(g): State<Arc<Gateway>>| async move { Json(g.endpoint_stats()) }))
        .route("/run", post(run))
        .with_state(gateway)
}

pub async fn run_service(cfg: &LiveConfig, listener: tokio::net::TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let g = Arc::new(Gateway::new(cfg)?);
    tracing::info!(addr = %listener.local_addr()?, endpoints = cfg.fnpacker.endpoints.len(), "router listening");
    serve_on(listener, app(g.clone()), shutdown).await?;
    for e in g.endpoint_stats() {
        tracing::info!(endpoint = %e.endpoint_id, pending = e.pending_total(), exclusive_for = ?e.exclusive_for, "router stopped");
    }
    Ok(())
}
