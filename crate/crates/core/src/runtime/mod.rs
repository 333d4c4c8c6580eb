// SPDX-License-Identifier: Apache-2.0

//! The model-serving enclave.
//!
//! An [`Enclave`] keeps at most one decrypted model, one cached key pair
//! `(K_M, K_R)` for a single `(model, user)`, and one attested channel to
//! the key service, shared by `tcs_count` request contexts. Each request:
//!
//! 1. fetches keys from the key service unless the cached pair matches,
//! 2. loads the model unless it is already resident,
//! 3. initializes the context's runtime unless it was built for this model,
//! 4. decrypts the payload with `K_R` and checks the sequence number,
//! 5. executes, serializes the output and seals it under `K_R`.
//!
//! Shared state is replaced only once no in-flight request uses it; a
//! request for a different `(model, user)` waits until then.

pub mod backend;
pub mod memory;
pub mod model;
pub mod storage;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, TryLockError};

use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{measure_code, Attester, CodeIdentity, Measurement, PlatformRoot, PlatformVerifier};
use crate::crypto::{aead_decrypt, aead_encrypt, sequenced_aad, AeadEnvelope, CryptoError, Digest, Purpose, SymKey};
use crate::keyservice::{KsClient, KsClientError, KsTransport, ProvisionedKeys};
use crate::wire::{Transcript, B64};

use backend::InferenceBackend;
use storage::ModelStore;

pub const RUNTIME_NAME: &str = "teeinfer-runtime";
pub const RUNTIME_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MAX_TCS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvocationPath {
    Cold,
    Warm,
    Hot,
}

impl fmt::Display for InvocationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvocationPath::Cold => "cold",
            InvocationPath::Warm => "warm",
            InvocationPath::Hot => "hot",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("model {0} not found in storage")]
    NotFound(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("model {0} failed integrity check")]
    ModelIntegrity(String),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error("key service denied access")]
    Denied,
    #[error("key service: {0}")]
    KeyService(String),
    #[error("request payload failed integrity check")]
    PayloadIntegrity,
    #[error("sequence number {seq} not above last accepted {last}")]
    Replay { seq: u64, last: u64 },
    #[error("execution: {0}")]
    Exec(String),
    #[error("request context busy")]
    ContextBusy,
    #[error("no request context {0}")]
    BadContext(usize),
    #[error("no pending output")]
    NoOutput,
    #[error("enclave only serves model {0}")]
    ModelNotAllowed(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("crypto: {0}")]
    Crypto(#[from] CryptoError),
}

/// Enclave build configuration. Everything except the memory figures is
/// part of the code identity and therefore of the measurement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub tcs_count: usize,
    pub key_cache: bool,
    pub clear_runtime_per_request: bool,
    /// Keep the model resident between requests. Off reloads the model and
    /// rebuilds runtimes for every request.
    pub model_reuse: bool,
    pub fixed_model: Option<String>,
    /// The only key service this enclave will release secrets to.
    pub keyservice_measurement: Measurement,
    pub runtime_buffer_bytes: usize,
    pub fixed_overhead_bytes: u64,
}

impl RuntimeConfig {
    pub fn new(keyservice_measurement: Measurement) -> Self {
        RuntimeConfig {
            tcs_count: 1,
            key_cache: true,
            clear_runtime_per_request: false,
            model_reuse: true,
            fixed_model: None,
            keyservice_measurement,
            runtime_buffer_bytes: 0,
            fixed_overhead_bytes: 0,
        }
    }

    /// One request at a time, no key cache, runtime cleared after each
    /// request.
    pub fn sequential_isolation(mut self) -> Self {
        self.tcs_count = 1;
        self.key_cache = false;
        self.clear_runtime_per_request = true;
        self
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !(1..=MAX_TCS).contains(&self.tcs_count) {
            return Err(RuntimeError::Config(format!("tcs_count {} outside 1..={MAX_TCS}", self.tcs_count)));
        }
        Ok(())
    }

    pub fn code_identity(&self, backend_name: &str) -> CodeIdentity {
        CodeIdentity::new(RUNTIME_NAME, RUNTIME_VERSION, backend_name)
            .with_flag("tcs_count", self.tcs_count)
            .with_flag("key_cache", self.key_cache)
            .with_flag("clear_runtime", self.clear_runtime_per_request)
            .with_flag("model_reuse", self.model_reuse)
            .with_flag("fixed_model", self.fixed_model.as_deref().unwrap_or("none"))
            .with_flag("keyservice", self.keyservice_measurement.to_hex())
    }

    pub fn measurement(&self, backend_name: &str) -> Measurement {
        measure_code(&self.code_identity(backend_name))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceRequest {
    pub user_id: Digest,
    pub model_id: String,
    pub keyservice_addr: String,
    pub payload: AeadEnvelope,
    pub seq: u64,
}

/// Body of `POST /run`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRequest {
    pub user_id: Digest,
    pub model_id: String,
    pub keyservice_addr: String,
    pub payload_b64: B64,
    pub seq: u64,
}

/// Response of `POST /run`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResponse {
    pub result_b64: B64,
    pub path: InvocationPath,
}

impl From<&InferenceRequest> for RunRequest {
    fn from(r: &InferenceRequest) -> Self {
        RunRequest {
            user_id: r.user_id,
            model_id: r.model_id.clone(),
            keyservice_addr: r.keyservice_addr.clone(),
            payload_b64: B64(r.payload.to_bytes()),
            seq: r.seq,
        }
    }
}

impl TryFrom<RunRequest> for InferenceRequest {
    type Error = RuntimeError;

    fn try_from(r: RunRequest) -> Result<Self, RuntimeError> {
        Ok(InferenceRequest {
            user_id: r.user_id,
            model_id: r.model_id,
            keyservice_addr: r.keyservice_addr,
            payload: AeadEnvelope::from_bytes(&r.payload_b64.0).map_err(|e| RuntimeError::Malformed(e.to_string()))?,
            seq: r.seq,
        })
    }
}

/// Seals an encoded input for `(model, user, seq)` under `K_R`.
pub fn seal_request(k_r: &SymKey, model_id: &str, user_id: &Digest, seq: u64, input: &[u8]) -> Result<AeadEnvelope, CryptoError> {
    aead_encrypt(k_r, input, &sequenced_aad(Purpose::Request, model_id, user_id, seq))
}

/// Opens a result envelope produced for `(model, user, seq)`.
pub fn open_result(k_r: &SymKey, model_id: &str, user_id: &Digest, seq: u64, env: &AeadEnvelope) -> Result<Vec<u8>, CryptoError> {
    aead_decrypt(k_r, env, &sequenced_aad(Purpose::Result, model_id, user_id, seq))
}

/// Maps a key-service address to a transport.
pub trait KsResolver: Send + Sync {
    fn resolve(&self, addr: &str) -> Result<Arc<dyn KsTransport>, RuntimeError>;
}

impl<F> KsResolver for F
where
    F: Fn(&str) -> Result<Arc<dyn KsTransport>, RuntimeError> + Send + Sync,
{
    fn resolve(&self, addr: &str) -> Result<Arc<dyn KsTransport>, RuntimeError> {
        self(addr)
    }
}

/// Resolves every address to the same transport.
pub struct FixedResolver(pub Arc<dyn KsTransport>);

impl KsResolver for FixedResolver {
    fn resolve(&self, _addr: &str) -> Result<Arc<dyn KsTransport>, RuntimeError> {
        Ok(self.0.clone())
    }
}

/// Which stages a request actually ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageWork {
    pub handshake: bool,
    pub provisioned: bool,
    pub model_loaded: bool,
    pub runtime_init: bool,
    pub model_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InvocationOutcome {
    pub path: InvocationPath,
    pub work: StageWork,
}

/// State relevant to path classification, observed before a request.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StateSnapshot {
    pub model_id: Option<String>,
    pub key_pair: Option<(String, Digest)>,
    pub ctx_runtime: Option<String>,
}

/// Cold for a new sandbox; Hot when model, context runtime and key pair
/// all match the request; Warm otherwise.
pub fn classify_invocation(sandbox_new: bool, before: &StateSnapshot, model_id: &str, user_id: &Digest) -> InvocationPath {
    if sandbox_new {
        return InvocationPath::Cold;
    }
    let model = before.model_id.as_deref() == Some(model_id);
    let rt = before.ctx_runtime.as_deref() == Some(model_id);
    let keys = before.key_pair.as_ref().is_some_and(|(m, u)| m == model_id && u == user_id);
    if model && rt && keys {
        InvocationPath::Hot
    } else {
        InvocationPath::Warm
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveStats {
    pub invocations: u64,
    pub handshakes: u64,
    pub provisioning_calls: u64,
    pub model_loads: u64,
    pub runtime_inits: u64,
    pub resident_models: usize,
    pub max_resident_models: usize,
    pub memory_bytes: u64,
    pub peak_memory_bytes: u64,
    pub staged_bytes: u64,
}

struct Resident<M> {
    model: M,
    gauge: Arc<AtomicUsize>,
}

impl<M> Drop for Resident<M> {
    fn drop(&mut self) {
        self.gauge.fetch_sub(1, Ordering::SeqCst);
    }
}

struct CachedKeys {
    model_id: String,
    user_id: Digest,
    keys: ProvisionedKeys,
}

struct Shared<M> {
    model: Option<(String, Arc<Resident<M>>)>,
    model_bytes: u64,
    model_users: usize,
    keys: Option<CachedKeys>,
    key_users: usize,
    channel: Option<(String, KsClient)>,
    last_seq: HashMap<(Digest, String), u64>,
    runtimes: usize,
    memory: u64,
    peak_memory: u64,
}

struct Context<R> {
    runtime: Option<R>,
    output: Option<AeadEnvelope>,
}

#[derive(Default)]
struct Counters {
    invocations: AtomicU64,
    handshakes: AtomicU64,
    provisioning: AtomicU64,
    model_loads: AtomicU64,
    runtime_inits: AtomicU64,
}

pub struct Enclave<B: InferenceBackend> {
    backend: B,
    config: RuntimeConfig,
    attester: Attester,
    verifier: PlatformVerifier,
    store: Arc<dyn ModelStore>,
    resolver: Arc<dyn KsResolver>,
    shared: Mutex<Shared<B::Model>>,
    changed: Condvar,
    contexts: Vec<Mutex<Context<B::Runtime>>>,
    free_contexts: Mutex<Vec<usize>>,
    context_freed: Condvar,
    staging: Mutex<BTreeMap<String, Vec<u8>>>,
    untrusted: Option<Transcript>,
    cold_pending: AtomicBool,
    counters: Counters,
    resident: Arc<AtomicUsize>,
    max_resident: AtomicUsize,
    rng: Mutex<ChaCha20Rng>,
}

impl<B: InferenceBackend> fmt::Debug for Enclave<B> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave").field("measurement", &self.measurement()).field("config", &self.config).finish_non_exhaustive()
    }
}

/// Releases a request's hold on the shared key pair and model, applying
/// the per-request clearing policy once the last holder leaves.
struct InFlight<'a, B: InferenceBackend> {
    enclave: &'a Enclave<B>,
    keys: bool,
    model: bool,
}

impl<B: InferenceBackend> Drop for InFlight<'_, B> {
    fn drop(&mut self) {
        if !self.keys && !self.model {
            return;
        }
        let e = self.enclave;
        let mut sh = e.lock_shared();
        if self.keys {
            sh.key_users -= 1;
            if sh.key_users == 0 && !e.config.key_cache {
                sh.keys = None;
            }
        }
        if self.model {
            sh.model_users -= 1;
            if sh.model_users == 0 && !e.config.model_reuse {
                sh.model = None;
                sh.model_bytes = 0;
                e.update_memory(&mut sh);
            }
        }
        drop(sh);
        e.changed.notify_all();
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl<B: InferenceBackend> Enclave<B> {
    /// Creates an enclave in a new sandbox; its first request is Cold.
    pub fn new(
        backend: B,
        config: RuntimeConfig,
        platform: PlatformRoot,
        store: Arc<dyn ModelStore>,
        resolver: Arc<dyn KsResolver>,
    ) -> Result<Self, RuntimeError> {
        config.validate()?;
        let measurement = config.measurement(backend.name());
        let verifier = platform.verifier();
        let overhead = config.fixed_overhead_bytes;
        let tcs = config.tcs_count;
        Ok(Enclave {
            backend,
            attester: Attester::new(platform, measurement),
            verifier,
            store,
            resolver,
            shared: Mutex::new(Shared {
                model: None,
                model_bytes: 0,
                model_users: 0,
                keys: None,
                key_users: 0,
                channel: None,
                last_seq: HashMap::new(),
                runtimes: 0,
                memory: overhead,
                peak_memory: overhead,
            }),
            changed: Condvar::new(),
            contexts: (0..tcs).map(|_| Mutex::new(Context { runtime: None, output: None })).collect(),
            free_contexts: Mutex::new((0..tcs).rev().collect()),
            context_freed: Condvar::new(),
            staging: Mutex::new(BTreeMap::new()),
            untrusted: None,
            cold_pending: AtomicBool::new(true),
            counters: Counters::default(),
            resident: Arc::new(AtomicUsize::new(0)),
            max_resident: AtomicUsize::new(0),
            rng: Mutex::new(ChaCha20Rng::from_rng(OsRng).expect("os rng")),
            config,
        })
    }

    /// Records every buffer the enclave exposes to untrusted code.
    pub fn with_untrusted_transcript(mut self, t: Transcript) -> Self {
        self.untrusted = Some(t);
        self
    }

    pub fn with_rng_seed(self, seed: u64) -> Self {
        *lock(&self.rng) = ChaCha20Rng::seed_from_u64(seed);
        self
    }

    /// Marks the sandbox as already running, so the next request is not Cold.
    pub fn mark_warm_sandbox(&self) {
        self.cold_pending.store(false, Ordering::SeqCst);
    }

    pub fn measurement(&self) -> Measurement {
        self.attester.measurement()
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn tcs_count(&self) -> usize {
        self.contexts.len()
    }

    pub fn stats(&self) -> EnclaveStats {
        let (memory_bytes, peak_memory_bytes) = {
            let sh = self.lock_shared();
            (sh.memory, sh.peak_memory)
        };
        EnclaveStats {
            invocations: self.counters.invocations.load(Ordering::SeqCst),
            handshakes: self.counters.handshakes.load(Ordering::SeqCst),
            provisioning_calls: self.counters.provisioning.load(Ordering::SeqCst),
            model_loads: self.counters.model_loads.load(Ordering::SeqCst),
            runtime_inits: self.counters.runtime_inits.load(Ordering::SeqCst),
            resident_models: self.resident.load(Ordering::SeqCst),
            max_resident_models: self.max_resident.load(Ordering::SeqCst),
            memory_bytes,
            peak_memory_bytes,
            staged_bytes: self.staged_bytes(),
        }
    }

    pub fn snapshot(&self, ctx: usize) -> StateSnapshot {
        let (model_id, key_pair) = {
            let sh = self.lock_shared();
            (sh.model.as_ref().map(|(id, _)| id.clone()), sh.keys.as_ref().map(|k| (k.model_id.clone(), k.user_id)))
        };
        let ctx_runtime = self
            .contexts
            .get(ctx)
            .and_then(|c| lock(c).runtime.as_ref().map(|rt| self.backend.runtime_model(rt)));
        StateSnapshot { model_id, key_pair, ctx_runtime }
    }

    fn lock_shared(&self) -> MutexGuard<'_, Shared<B::Model>> {
        lock(&self.shared)
    }

    fn update_memory(&self, sh: &mut Shared<B::Model>) {
        sh.memory = self.config.fixed_overhead_bytes + sh.model_bytes + sh.runtimes as u64 * self.config.runtime_buffer_bytes as u64;
        sh.peak_memory = sh.peak_memory.max(sh.memory);
    }

    fn record_untrusted(&self, bytes: &[u8]) {
        if let Some(t) = &self.untrusted {
            t.record(bytes);
        }
    }

    /// Copies an encrypted model file from storage into untrusted staging
    /// memory and returns its size.
    pub fn oc_load_model(&self, model_id: &str) -> Result<usize, RuntimeError> {
        let bytes = self.store.fetch(model_id)?;
        self.record_untrusted(&bytes);
        let n = bytes.len();
        lock(&self.staging).insert(model_id.to_owned(), bytes);
        Ok(n)
    }

    pub fn oc_free_loaded(&self, model_id: &str) {
        lock(&self.staging).remove(model_id);
    }

    pub fn staged_bytes(&self) -> u64 {
        lock(&self.staging).values().map(|v| v.len() as u64).sum()
    }

    fn connect(&self, addr: &str) -> Result<KsClient, RuntimeError> {
        let transport = self.resolver.resolve(addr)?;
        let mut rng = lock(&self.rng);
        let client = KsClient::connect(transport, &mut *rng, self.verifier, self.config.keyservice_measurement, Some(self.attester.clone()))
            .map_err(|e| RuntimeError::KeyService(e.to_string()))?;
        self.counters.handshakes.fetch_add(1, Ordering::SeqCst);
        Ok(client)
    }

    fn provision(&self, sh: &mut Shared<B::Model>, req: &InferenceRequest, work: &mut StageWork) -> Result<ProvisionedKeys, RuntimeError> {
        let mut fresh = false;
        if sh.channel.as_ref().is_none_or(|(a, _)| a != &req.keyservice_addr) {
            sh.channel = None;
            sh.channel = Some((req.keyservice_addr.clone(), self.connect(&req.keyservice_addr)?));
            work.handshake = true;
            fresh = true;
        }
        loop {
            let (_, client) = sh.channel.as_mut().expect("channel established above");
            self.counters.provisioning.fetch_add(1, Ordering::SeqCst);
            work.provisioned = true;
            match client.provision(req.user_id, &req.model_id) {
                Ok(k) => return Ok(k),
                Err(e) if e.is_denied() => return Err(RuntimeError::Denied),
                Err(KsClientError::Service(e)) => return Err(RuntimeError::KeyService(e.to_string())),
                Err(e) => {
                    // The cached channel broke; retry once on a new one.
                    sh.channel = None;
                    if fresh {
                        return Err(RuntimeError::KeyService(e.to_string()));
                    }
                    tracing::debug!(error = %e, "key service channel lost, reconnecting");
                    sh.channel = Some((req.keyservice_addr.clone(), self.connect(&req.keyservice_addr)?));
                    work.handshake = true;
                    fresh = true;
                }
            }
        }
    }

    fn load_model(&self, sh: &mut Shared<B::Model>, k_m: &SymKey, model_id: &str, work: &mut StageWork) -> Result<(), RuntimeError> {
        sh.model = None;
        sh.model_bytes = 0;
        self.update_memory(sh);
        self.oc_load_model(model_id)?;
        let file = lock(&self.staging).get(model_id).cloned().unwrap_or_default();
        self.oc_free_loaded(model_id);
        let model = self.backend.model_load(model_id, &file, k_m)?;
        let size = self.backend.model_size(&model);
        let now = self.resident.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_resident.fetch_max(now, Ordering::SeqCst);
        sh.model = Some((model_id.to_owned(), Arc::new(Resident { model, gauge: self.resident.clone() })));
        sh.model_bytes = size;
        self.update_memory(sh);
        self.counters.model_loads.fetch_add(1, Ordering::SeqCst);
        work.model_loaded = true;
        work.model_bytes = size;
        Ok(())
    }

    /// Serves one request on context `ctx` and leaves the sealed result in
    /// that context's output buffer.
    pub fn ec_model_inf(&self, req: &InferenceRequest, ctx: usize) -> Result<InvocationOutcome, RuntimeError> {
        let slot = self.contexts.get(ctx).ok_or(RuntimeError::BadContext(ctx))?;
        let mut c = match slot.try_lock() {
            Ok(g) => g,
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
            Err(TryLockError::WouldBlock) => return Err(RuntimeError::ContextBusy),
        };
        self.run(req, &mut c)
    }

    fn run(&self, req: &InferenceRequest, c: &mut Context<B::Runtime>) -> Result<InvocationOutcome, RuntimeError> {
        if let Some(f) = &self.config.fixed_model {
            if f != &req.model_id {
                return Err(RuntimeError::ModelNotAllowed(f.clone()));
            }
        }
        self.counters.invocations.fetch_add(1, Ordering::SeqCst);
        let cold = self.cold_pending.swap(false, Ordering::SeqCst);
        let mut work = StageWork::default();
        c.output = None;

        let mut inflight = InFlight { enclave: self, keys: false, model: false };
        let (model, k_r) = {
            let mut sh = self.lock_shared();
            let matches = |sh: &Shared<B::Model>| {
                self.config.key_cache && sh.keys.as_ref().is_some_and(|k| k.model_id == req.model_id && k.user_id == req.user_id)
            };
            while !matches(&sh) && sh.key_users > 0 {
                sh = self.changed.wait(sh).unwrap_or_else(|e| e.into_inner());
            }
            if !matches(&sh) {
                let keys = self.provision(&mut sh, req, &mut work)?;
                sh.keys = Some(CachedKeys { model_id: req.model_id.clone(), user_id: req.user_id, keys });
            }
            sh.key_users += 1;
            inflight.keys = true;
            let keys = &sh.keys.as_ref().expect("key pair cached above").keys;
            let (k_m, k_r) = (keys.model_key.clone(), keys.request_key.clone());

            let model_matches = |sh: &Shared<B::Model>| sh.model.as_ref().is_some_and(|(id, _)| id == &req.model_id);
            while !model_matches(&sh) && sh.model_users > 0 {
                sh = self.changed.wait(sh).unwrap_or_else(|e| e.into_inner());
            }
            if !model_matches(&sh) {
                self.load_model(&mut sh, &k_m, &req.model_id, &mut work)?;
            }
            sh.model_users += 1;
            inflight.model = true;
            (sh.model.as_ref().expect("model resident").1.clone(), k_r)
        };

        let stale = c.runtime.as_ref().is_some_and(|rt| self.backend.runtime_model(rt) != req.model_id);
        if stale || (work.model_loaded && c.runtime.is_some()) {
            c.runtime = None;
            self.runtime_gone();
        }
        if c.runtime.is_none() {
            c.runtime = Some(self.backend.runtime_init(&req.model_id, &model.model, self.config.runtime_buffer_bytes)?);
            self.counters.runtime_inits.fetch_add(1, Ordering::SeqCst);
            work.runtime_init = true;
            let mut sh = self.lock_shared();
            sh.runtimes += 1;
            self.update_memory(&mut sh);
        }

        let input = aead_decrypt(&k_r, &req.payload, &sequenced_aad(Purpose::Request, &req.model_id, &req.user_id, req.seq))
            .map_err(|_| RuntimeError::PayloadIntegrity)?;
        {
            let mut sh = self.lock_shared();
            let key = (req.user_id, req.model_id.clone());
            if let Some(&last) = sh.last_seq.get(&key) {
                if req.seq <= last {
                    return Err(RuntimeError::Replay { seq: req.seq, last });
                }
            }
            sh.last_seq.insert(key, req.seq);
        }

        let rt = c.runtime.as_mut().expect("runtime initialized above");
        self.backend.model_exec(&input, &model.model, rt)?;
        let out = self.backend.prepare_output(rt)?;
        c.output = Some(aead_encrypt(&k_r, &out, &sequenced_aad(Purpose::Result, &req.model_id, &req.user_id, req.seq))?);
        drop(model);

        if self.config.clear_runtime_per_request || !self.config.model_reuse {
            c.runtime = None;
            self.runtime_gone();
        }
        drop(inflight);

        let path = if cold {
            InvocationPath::Cold
        } else if work.provisioned || work.model_loaded || work.runtime_init {
            InvocationPath::Warm
        } else {
            InvocationPath::Hot
        };
        Ok(InvocationOutcome { path, work })
    }

    fn runtime_gone(&self) {
        let mut sh = self.lock_shared();
        sh.runtimes -= 1;
        self.update_memory(&mut sh);
    }

    /// Takes the sealed result from context `ctx`.
    pub fn ec_get_output(&self, ctx: usize) -> Result<AeadEnvelope, RuntimeError> {
        let slot = self.contexts.get(ctx).ok_or(RuntimeError::BadContext(ctx))?;
        let mut c = match slot.try_lock() {
            Ok(g) => g,
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
            Err(TryLockError::WouldBlock) => return Err(RuntimeError::ContextBusy),
        };
        let env = c.output.take().ok_or(RuntimeError::NoOutput)?;
        self.record_untrusted(&env.to_bytes());
        Ok(env)
    }

    /// Frees context `ctx`'s runtime and output. With the key cache
    /// disabled the cached key pair is dropped too; the model stays.
    pub fn ec_clear_exec_ctx(&self, ctx: usize) -> Result<(), RuntimeError> {
        let slot = self.contexts.get(ctx).ok_or(RuntimeError::BadContext(ctx))?;
        let mut c = match slot.try_lock() {
            Ok(g) => g,
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
            Err(TryLockError::WouldBlock) => return Err(RuntimeError::ContextBusy),
        };
        c.output = None;
        if c.runtime.take().is_some() {
            self.runtime_gone();
        }
        if !self.config.key_cache {
            let mut sh = self.lock_shared();
            if sh.key_users == 0 {
                sh.keys = None;
            }
        }
        Ok(())
    }

    /// Runs a request on the next free context, waiting for one if all
    /// are busy, and returns the sealed result.
    pub fn invoke(&self, req: &InferenceRequest) -> Result<(AeadEnvelope, InvocationOutcome), RuntimeError> {
        let ctx = {
            let mut free = lock(&self.free_contexts);
            loop {
                if let Some(i) = free.pop() {
                    break i;
                }
                free = self.context_freed.wait(free).unwrap_or_else(|e| e.into_inner());
            }
        };
        let result = self.ec_model_inf(req, ctx).and_then(|o| Ok((self.ec_get_output(ctx)?, o)));
        lock(&self.free_contexts).push(ctx);
        self.context_freed.notify_one();
        result
    }
}
