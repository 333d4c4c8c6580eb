// SPDX-License-Identifier: Apache-2.0

//! Session protocol between the key service and its clients.
//!
//! A session starts with the attestation handshake (`hello`, `finish`).
//! Every later call carries a channel-sealed JSON [`KsRequest`] addressed to
//! one [`Route`]; the reply is a channel-sealed [`KsResponse`]. The same
//! message flow runs in-process ([`LocalTransport`]) and over HTTP.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{KeyService, KsError, ProvisionRequest, ProvisionedKeys};
use crate::attestation::{Attester, Expectation, HandshakeError, HandshakeMessage, Initiator, Measurement, PendingResponder, PlatformVerifier, SecureChannel};
use crate::crypto::{AeadEnvelope, CryptoError, Digest, SymKey};
use crate::wire::{Transcript, B64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Register,
    ModelKey,
    Grant,
    ReqKey,
    Provision,
}

impl Route {
    pub fn path(self) -> &'static str {
        match self {
            Route::Register => "/register",
            Route::ModelKey => "/model_key",
            Route::Grant => "/grant",
            Route::ReqKey => "/req_key",
            Route::Provision => "/provision",
        }
    }

    pub fn from_path(p: &str) -> Option<Route> {
        [Route::Register, Route::ModelKey, Route::Grant, Route::ReqKey, Route::Provision]
            .into_iter()
            .find(|r| r.path() == p)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum KsRequest {
    Register { identity_key: B64 },
    ModelKey { oid: Digest, sealed: B64 },
    Grant { oid: Digest, sealed: B64 },
    ReqKey { uid: Digest, sealed: B64 },
    Provision { user_id: Digest, model_id: String },
}

impl KsRequest {
    fn route(&self) -> Route {
        match self {
            KsRequest::Register { .. } => Route::Register,
            KsRequest::ModelKey { .. } => Route::ModelKey,
            KsRequest::Grant { .. } => Route::Grant,
            KsRequest::ReqKey { .. } => Route::ReqKey,
            KsRequest::Provision { .. } => Route::Provision,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum KsResponse {
    Registered { id: Digest },
    Ok,
    Keys { model_key: B64, request_key: B64 },
    Error { error: KsError },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("handshake failed: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("unknown or closed session")]
    UnknownSession,
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("transport i/o: {0}")]
    Io(String),
}

/// Byte-level access to a key service.
pub trait KsTransport: Send + Sync {
    fn hello(&self, hello: &HandshakeMessage) -> Result<(String, HandshakeMessage), TransportError>;
    fn finish(&self, session: &str, finish: &HandshakeMessage) -> Result<(), TransportError>;
    fn call(&self, session: &str, route: Route, body: &[u8]) -> Result<Vec<u8>, TransportError>;
}

enum Session {
    Pending(PendingResponder),
    Open(SecureChannel),
}

/// Server side of the session protocol; one instance per key service.
/// Sessions are independent and may be driven from different threads.
pub struct KsServer {
    service: Arc<KeyService>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Option<Session>>>>>,
    rng: Mutex<ChaCha20Rng>,
    next_id: AtomicU64,
}

impl KsServer {
    pub fn new(service: Arc<KeyService>) -> Self {
        Self::with_rng(service, ChaCha20Rng::from_rng(OsRng).expect("os rng"))
    }

    pub fn with_rng(service: Arc<KeyService>, rng: ChaCha20Rng) -> Self {
        KsServer { service, sessions: Mutex::new(HashMap::new()), rng: Mutex::new(rng), next_id: AtomicU64::new(1) }
    }

    pub fn service(&self) -> &Arc<KeyService> {
        &self.service
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    fn slot(&self, session: &str) -> Result<Arc<Mutex<Option<Session>>>, TransportError> {
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(session)
            .cloned()
            .ok_or(TransportError::UnknownSession)
    }

    pub fn close(&self, session: &str) {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).remove(session);
    }

    pub fn hello(&self, hello: &HandshakeMessage) -> Result<(String, HandshakeMessage), TransportError> {
        let (pending, reply) = {
            let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
            self.service.responder().respond(&mut *rng, hello)?
        };
        let id = format!("{:016x}", self.next_id.fetch_add(1, Ordering::SeqCst));
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(Mutex::new(Some(Session::Pending(pending)))));
        Ok((id, reply))
    }

    pub fn finish(&self, session: &str, finish: &HandshakeMessage) -> Result<(), TransportError> {
        let slot = self.slot(session)?;
        let mut guard = slot.lock().unwrap_or_else(|e| e.into_inner());
        let pending = match guard.take() {
            Some(Session::Pending(p)) => p,
            other => {
                *guard = other;
                return Err(TransportError::Rejected("session already established".into()));
            }
        };
        match pending.finish(finish) {
            Ok(channel) => {
                tracing::debug!(session, peer = ?channel.peer_measurement(), "key service session established");
                *guard = Some(Session::Open(channel));
                Ok(())
            }
            Err(e) => {
                drop(guard);
                self.close(session);
                tracing::warn!(session, error = %e, "handshake aborted");
                Err(e.into())
            }
        }
    }

    pub fn call(&self, session: &str, route: Route, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        let slot = self.slot(session)?;
        let mut guard = slot.lock().unwrap_or_else(|e| e.into_inner());
        let Some(Session::Open(channel)) = guard.as_mut() else {
            return Err(TransportError::Rejected("handshake not completed".into()));
        };
        let opened = AeadEnvelope::from_bytes(body).map_err(|e| e.to_string()).and_then(|env| channel.open(&env).map_err(|e| e.to_string()));
        let plaintext = match opened {
            Ok(p) => p,
            Err(e) => {
                drop(guard);
                self.close(session);
                return Err(TransportError::Rejected(format!("channel record rejected: {e}")));
            }
        };
        let response = match serde_json::from_slice::<KsRequest>(&plaintext) {
            Ok(req) if req.route() != route => KsResponse::Error { error: KsError::WrongRoute },
            Ok(req) => self.dispatch(req, channel),
            Err(e) => KsResponse::Error { error: KsError::Malformed(e.to_string()) },
        };
        let out = serde_json::to_vec(&response).expect("response serializes");
        channel
            .seal(&out)
            .map(|env| env.to_bytes())
            .map_err(|e| TransportError::Rejected(e.to_string()))
    }

    fn dispatch(&self, req: KsRequest, channel: &SecureChannel) -> KsResponse {
        let ks = &self.service;
        let envelope = |b: &B64| AeadEnvelope::from_bytes(&b.0).map_err(|e| KsError::Malformed(e.to_string()));
        let result = match req {
            KsRequest::Register { identity_key } => SymKey::from_slice(&identity_key.0)
                .map_err(|e| KsError::Malformed(e.to_string()))
                .and_then(|k| ks.user_registration(&k))
                .map(|id| KsResponse::Registered { id }),
            KsRequest::ModelKey { oid, sealed } => envelope(&sealed).and_then(|e| ks.add_model_key(&oid, &e)).map(|_| KsResponse::Ok),
            KsRequest::Grant { oid, sealed } => envelope(&sealed).and_then(|e| ks.grant_access(&oid, &e)).map(|_| KsResponse::Ok),
            KsRequest::ReqKey { uid, sealed } => envelope(&sealed).and_then(|e| ks.add_req_key(&uid, &e)).map(|_| KsResponse::Ok),
            KsRequest::Provision { user_id, model_id } => ks
                .key_provisioning(&ProvisionRequest { user_id, model_id }, channel)
                .map(|k| KsResponse::Keys { model_key: B64(k.model_key.expose().to_vec()), request_key: B64(k.request_key.expose().to_vec()) }),
        };
        result.unwrap_or_else(|error| KsResponse::Error { error })
    }
}

/// In-process transport. Every byte that would cross the network is
/// appended to the optional transcript.
pub struct LocalTransport {
    server: Arc<KsServer>,
    wire: Option<Transcript>,
}

impl LocalTransport {
    pub fn new(server: Arc<KsServer>) -> Self {
        LocalTransport { server, wire: None }
    }

    pub fn recorded(server: Arc<KsServer>, wire: Transcript) -> Self {
        LocalTransport { server, wire: Some(wire) }
    }

    pub fn server(&self) -> &Arc<KsServer> {
        &self.server
    }

    fn rec(&self, bytes: &[u8]) {
        if let Some(w) = &self.wire {
            w.record(bytes);
        }
    }
}

impl KsTransport for LocalTransport {
    fn hello(&self, hello: &HandshakeMessage) -> Result<(String, HandshakeMessage), TransportError> {
        self.rec(hello.to_json().as_bytes());
        let (id, reply) = self.server.hello(hello)?;
        self.rec(id.as_bytes());
        self.rec(reply.to_json().as_bytes());
        Ok((id, reply))
    }

    fn finish(&self, session: &str, finish: &HandshakeMessage) -> Result<(), TransportError> {
        self.rec(finish.to_json().as_bytes());
        self.server.finish(session, finish)
    }

    fn call(&self, session: &str, route: Route, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.rec(route.path().as_bytes());
        self.rec(body);
        let reply = self.server.call(session, route, body)?;
        self.rec(&reply);
        Ok(reply)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KsClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("handshake failed: {0}")]
    Handshake(#[from] HandshakeError),
    #[error("channel: {0}")]
    Channel(#[from] CryptoError),
    #[error("key service: {0}")]
    Service(KsError),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl KsClientError {
    pub fn is_denied(&self) -> bool {
        matches!(self, KsClientError::Service(KsError::Denied))
    }
}

/// Client end of an attested key-service session.
pub struct KsClient {
    transport: Arc<dyn KsTransport>,
    session: String,
    channel: SecureChannel,
}

impl std::fmt::Debug for KsClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KsClient").field("session", &self.session).field("channel", &self.channel).finish()
    }
}

impl KsClient {
    /// Attests the key service against `expected` and opens a session.
    /// `attester` is supplied by enclaves that must attest themselves.
    /// Nothing secret is sent before the key service's report verifies.
    pub fn connect<R: RngCore + CryptoRng>(
        transport: Arc<dyn KsTransport>,
        rng: &mut R,
        verifier: PlatformVerifier,
        expected: Measurement,
        attester: Option<Attester>,
    ) -> Result<Self, KsClientError> {
        let (init, hello) = Initiator::start(rng, verifier, Expectation::Exact(expected), attester);
        let (session, reply) = transport.hello(&hello)?;
        let (channel, finish) = init.finish(&reply)?;
        transport.finish(&session, &finish)?;
        Ok(KsClient { transport, session, channel })
    }

    pub fn keyservice_measurement(&self) -> Measurement {
        self.channel.peer_measurement().expect("initiator channels always carry the responder report")
    }

    fn request(&mut self, req: &KsRequest) -> Result<KsResponse, KsClientError> {
        let body = serde_json::to_vec(req).expect("request serializes");
        let sealed = self.channel.seal(&body)?;
        let reply = self.transport.call(&self.session, req.route(), &sealed.to_bytes())?;
        let env = AeadEnvelope::from_bytes(&reply)?;
        let pt = self.channel.open(&env)?;
        let resp: KsResponse = serde_json::from_slice(&pt).map_err(|e| KsClientError::Protocol(e.to_string()))?;
        match resp {
            KsResponse::Error { error } => Err(KsClientError::Service(error)),
            other => Ok(other),
        }
    }

    fn expect_ok(&mut self, req: &KsRequest) -> Result<(), KsClientError> {
        match self.request(req)? {
            KsResponse::Ok => Ok(()),
            other => Err(KsClientError::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    pub fn register(&mut self, identity_key: &SymKey) -> Result<Digest, KsClientError> {
        match self.request(&KsRequest::Register { identity_key: B64(identity_key.expose().to_vec()) })? {
            KsResponse::Registered { id } => Ok(id),
            other => Err(KsClientError::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    pub fn add_model_key(&mut self, oid: Digest, sealed: &AeadEnvelope) -> Result<(), KsClientError> {
        self.expect_ok(&KsRequest::ModelKey { oid, sealed: B64(sealed.to_bytes()) })
    }

    pub fn grant_access(&mut self, oid: Digest, sealed: &AeadEnvelope) -> Result<(), KsClientError> {
        self.expect_ok(&KsRequest::Grant { oid, sealed: B64(sealed.to_bytes()) })
    }

    pub fn add_req_key(&mut self, uid: Digest, sealed: &AeadEnvelope) -> Result<(), KsClientError> {
        self.expect_ok(&KsRequest::ReqKey { uid, sealed: B64(sealed.to_bytes()) })
    }

    pub fn provision(&mut self, user_id: Digest, model_id: &str) -> Result<ProvisionedKeys, KsClientError> {
        match self.request(&KsRequest::Provision { user_id, model_id: model_id.to_owned() })? {
            KsResponse::Keys { model_key, request_key } => Ok(ProvisionedKeys {
                model_key: SymKey::from_slice(&model_key.0)?,
                request_key: SymKey::from_slice(&request_key.0)?,
            }),
            other => Err(KsClientError::Protocol(format!("unexpected response {other:?}"))),
        }
    }
}
