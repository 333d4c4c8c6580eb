// SPDX-License-Identifier: Apache-2.0

//! Live mode: the key service, workers and the router as HTTP services,
//! plus the owner and user commands that talk to them.

pub mod clients;
pub mod fnpacker;
pub mod http;
pub mod keyservice;
pub mod worker;

use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use axum::Router;
use serde::{Deserialize, Serialize};
use teeinfer::attestation::{Measurement, PlatformRoot, PlatformVerifier};
use teeinfer::crypto::sha256;
use teeinfer::keyservice::keyservice_measurement;
use teeinfer::runtime::RuntimeConfig;
use teeinfer::LinearBackendF64;
use teeinfer_sim::RuntimePolicy;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveConfig {
    /// Seed of the simulated hardware root shared by every service on
    /// this host. Clients only use the derived verifier.
    pub platform_seed: u64,
    /// Key service URL; also the address placed in requests.
    pub keyservice_url: String,
    /// Expected key service measurement, hex. Defaults to the bundled build.
    #[serde(default)]
    pub keyservice_measurement: Option<String>,
    /// Encrypted model files, one per model id.
    pub model_dir: PathBuf,
    #[serde(default)]
    pub keyservice: KeyServiceSection,
    #[serde(default)]
    pub worker: WorkerSection,
    #[serde(default)]
    pub fnpacker: FnPackerSection,
    #[serde(default)]
    pub client: ClientSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyServiceSection {
    pub bind: String,
    /// Sealed append-only store; in-memory when absent.
    pub journal: Option<PathBuf>,
}

impl Default for KeyServiceSection {
    fn default() -> Self {
        KeyServiceSection { bind: "127.0.0.1:7100".into(), journal: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkerSection {
    pub bind: String,
    pub tcs_count: usize,
    pub policy: RuntimePolicy,
    pub isolation: bool,
    pub fixed_model: Option<String>,
    /// Added to every model file read.
    pub fetch_latency_ms: u64,
}

impl Default for WorkerSection {
    fn default() -> Self {
        WorkerSection {
            bind: "127.0.0.1:7200".into(),
            tcs_count: 4,
            policy: RuntimePolicy::FullReuse,
            isolation: false,
            fixed_model: None,
            fetch_latency_ms: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FnPackerSection {
    pub bind: String,
    /// Worker base URLs.
    pub endpoints: Vec<String>,
    pub models: Vec<String>,
    pub memory_budget_mb: u64,
}

impl Default for FnPackerSection {
    fn default() -> Self {
        FnPackerSection { bind: "127.0.0.1:7000".into(), endpoints: Vec::new(), models: Vec::new(), memory_budget_mb: 512 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSection {
    /// Where users send inference requests: the router or a worker.
    pub gateway: String,
}

impl Default for ClientSection {
    fn default() -> Self {
        ClientSection { gateway: "http://127.0.0.1:7000".into() }
    }
}

impl LiveConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: LiveConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.expected_keyservice()?;
        let base = path.parent().unwrap_or(Path::new(""));
        Ok(cfg.rebased(base))
    }

    /// Resolves relative paths against `base`.
    pub fn rebased(mut self, base: &Path) -> Self {
        if self.model_dir.is_relative() {
            self.model_dir = base.join(&self.model_dir);
        }
        if let Some(j) = self.keyservice.journal.as_mut().filter(|j| j.is_relative()) {
            *j = base.join(&*j);
        }
        self
    }

    pub fn platform(&self) -> PlatformRoot {
        PlatformRoot::from_seed(sha256(&self.platform_seed.to_le_bytes()).0)
    }

    pub fn verifier(&self) -> PlatformVerifier {
        self.platform().verifier()
    }

    /// E_K as configured.
    pub fn expected_keyservice(&self) -> Result<Measurement> {
        match &self.keyservice_measurement {
            Some(h) => Measurement::from_hex(h).map_err(|e| anyhow::anyhow!("keyservice_measurement: {e}")),
            None => Ok(keyservice_measurement()),
        }
    }

    pub fn runtime_config(&self) -> Result<RuntimeConfig> {
        let w = &self.worker;
        let mut c = RuntimeConfig::new(self.expected_keyservice()?);
        c.tcs_count = w.tcs_count;
        c.fixed_model = w.fixed_model.clone();
        if w.isolation {
            c = c.sequential_isolation();
        }
        if w.policy == RuntimePolicy::IsoReuse {
            c.model_reuse = false;
        }
        c.validate()?;
        Ok(c)
    }

    /// E_S of the configured worker.
    pub fn worker_measurement(&self) -> Result<Measurement> {
        use teeinfer::runtime::backend::InferenceBackend;
        Ok(self.runtime_config()?.measurement(LinearBackendF64::default().name()))
    }
}

/// JSON body of `GET /health`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub role: String,
    pub measurement: Option<String>,
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve_on(listener: tokio::net::TcpListener, app: Router, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

pub async fn bind(addr: &str) -> Result<(tokio::net::TcpListener, SocketAddr)> {
    let l = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    let a = l.local_addr()?;
    Ok((l, a))
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}
