// SPDX-License-Identifier: Apache-2.0

//! Serverless action wrapping one enclave: `POST /init`, then `POST /run`.

use std::future::Future;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use teeinfer::attestation::{Measurement, PlatformRoot};
use teeinfer::keyservice::KsTransport;
use teeinfer::runtime::storage::DirStore;
use teeinfer::runtime::{EnclaveStats, InferenceRequest, KsResolver, RunRequest, RunResponse, RuntimeConfig, RuntimeError};
use teeinfer::{LinearBackendF64, LinearEnclave};
use teeinfer_sim::RuntimePolicy;

use super::http::HttpTransport;
use super::{serve_on, Health, LiveConfig};

#[derive(Debug, Serialize, Deserialize)]
pub struct ActionError {
    pub error: String,
}

pub struct Worker {
    config: RuntimeConfig,
    platform: PlatformRoot,
    store: Arc<DirStore>,
    resolver: Arc<dyn KsResolver>,
    /// Long-lived enclave; `None` under the native policy.
    enclave: Option<Arc<LinearEnclave>>,
    initialized: AtomicBool,
}

fn http_resolver(addr: &str) -> Result<Arc<dyn KsTransport>, RuntimeError> {
    HttpTransport::new(addr).map(|t| Arc::new(t) as Arc<dyn KsTransport>).map_err(|e| RuntimeError::KeyService(e.to_string()))
}

impl Worker {
    pub fn new(cfg: &LiveConfig) -> Result<Self> {
        let store = Arc::new(DirStore::new(&cfg.model_dir).with_latency(Duration::from_millis(cfg.worker.fetch_latency_ms)));
        let mut w = Worker {
            config: cfg.runtime_config()?,
            platform: cfg.platform(),
            store,
            resolver: Arc::new(http_resolver),
            enclave: None,
            initialized: AtomicBool::new(false),
        };
        if cfg.worker.policy != RuntimePolicy::Native {
            w.enclave = Some(Arc::new(w.new_enclave()?));
        }
        Ok(w)
    }

    fn new_enclave(&self) -> Result<LinearEnclave, RuntimeError> {
        LinearEnclave::new(LinearBackendF64::default(), self.config.clone(), self.platform.clone(), self.store.clone(), self.resolver.clone())
    }

    pub fn measurement(&self) -> Measurement {
        use teeinfer::runtime::backend::InferenceBackend;
        self.config.measurement(LinearBackendF64::default().name())
    }

    pub fn stats(&self) -> EnclaveStats {
        self.enclave.as_ref().map(|e| e.stats()).unwrap_or_default()
    }

    /// Blocking: may talk to the key service and read model files.
    fn run(&self, req: &InferenceRequest) -> Result<RunResponse, RuntimeError> {
        let (env, outcome) = match &self.enclave {
            Some(e) => e.invoke(req)?,
            None => self.new_enclave()?.invoke(req)?,
        };
        Ok(RunResponse { result_b64: teeinfer::wire::B64(env.to_bytes()), path: outcome.path })
    }
}

fn reject(status: StatusCode, error: impl ToString) -> Response {
    (status, Json(ActionError { error: error.to_string() })).into_response()
}

async fn init(State(w): State<Arc<Worker>>) -> Response {
    w.initialized.store(true, Ordering::SeqCst);
    Json(serde_json::json!({ "ok": true })).into_response()
}

async fn run(State(w): State<Arc<Worker>>, Json(body): Json<RunRequest>) -> Response {
    if !w.initialized.load(Ordering::SeqCst) {
        return reject(StatusCode::CONFLICT, "action not initialized; POST /init first");
    }
    let req = match InferenceRequest::try_from(body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, e),
    };
    let worker = w.clone();
    match tokio::task::spawn_blocking(move || worker.run(&req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(RuntimeError::Denied)) => reject(StatusCode::FORBIDDEN, RuntimeError::Denied),
        Ok(Err(e)) => {
            tracing::warn!(error = %e, "request rejected");
            reject(StatusCode::BAD_REQUEST, e)
        }
        Err(e) => reject(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

pub fn app(worker: Arc<Worker>) -> Router {
    let m = worker.measurement().to_hex();
    Router::new()
        .route(
            "/health",
            get(move || {
                let m = m.clone();
                async move { Json(Health { role: "worker".into(), measurement: Some(m) }) }
            }),
        )
        .route("/stats", get(|State(w): State<Arc<Worker>>| async move { Json(w.stats()) }))
        .route("/init", post(init))
        .route("/run", post(run))
        .with_state(worker)
}

pub async fn run_service(cfg: &LiveConfig, listener: tokio::net::TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let worker = Arc::new(Worker::new(cfg)?);
    tracing::info!(addr = %listener.local_addr()?, measurement = %worker.measurement().to_hex(), policy = cfg.worker.policy.name(), "worker listening");
    serve_on(listener, app(worker.clone()), shutdown).await?;
    let s = worker.stats();
    tracing::info!(invocations = s.invocations, provisioning_calls = s.provisioning_calls, model_loads = s.model_loads, "worker stopped");
    Ok(())
}
