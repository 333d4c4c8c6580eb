// SPDX-License-Identifier: Apache-2.0

//! The key broker enclave.
//!
//! Holds four stores: identity keys, model keys, request keys indexed by
//! `(model, enclave, user)`, and the access-control set over the same
//! triples. Keys leave only through [`KeyService::key_provisioning`], and
//! only to a mutually attested peer whose measurement is part of a triple
//! present in both the access-control set and the request-key store.

mod journal;
pub mod payload;
pub mod protocol;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::attestation::{measure_code, Attester, CodeIdentity, Expectation, Measurement, PeerAuth, PlatformRoot, PlatformVerifier, Responder, SecureChannel};
use crate::crypto::{aead_decrypt, context_aad, hash_identity, AeadEnvelope, CryptoError, Digest, Purpose, SymKey};

pub use journal::Journal;
pub use protocol::{KsClient, KsClientError, KsServer, KsTransport, LocalTransport, Route, TransportError};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum KsError {
    #[error("identity not registered")]
    NotRegistered,
    #[error("payload not sealed by the registered identity key")]
    Unauthorized,
    #[error("model {0} was not deposited by this owner")]
    NotOwner(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
    /// Uniform denial; never says which check failed.
    #[error("access denied")]
    Denied,
    #[error("message does not match the endpoint it was sent to")]
    WrongRoute,
    #[error("journal: {0}")]
    Journal(String),
}

/// `(model_id, enclave measurement, user_id)`, the key of both the
/// request-key store and the access-control set.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccessTriple {
    pub model_id: String,
    pub enclave: Measurement,
    pub user_id: Digest,
}

impl AccessTriple {
    pub fn new(model_id: impl Into<String>, enclave: Measurement, user_id: Digest) -> Self {
        AccessTriple { model_id: model_id.into(), enclave, user_id }
    }
}

#[derive(Clone, Default)]
pub struct KeyStoreState {
    identities: BTreeMap<Digest, SymKey>,
    model_keys: BTreeMap<String, SymKey>,
    model_owner: BTreeMap<String, Digest>,
    request_keys: BTreeMap<AccessTriple, SymKey>,
    grants: BTreeSet<AccessTriple>,
}

impl KeyStoreState {
    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    pub fn model_key_count(&self) -> usize {
        self.model_keys.len()
    }

    pub fn request_key_count(&self) -> usize {
        self.request_keys.len()
    }

    pub fn grant_count(&self) -> usize {
        self.grants.len()
    }

    pub fn is_registered(&self, id: &Digest) -> bool {
        self.identities.contains_key(id)
    }

    pub fn has_model_key(&self, model_id: &str) -> bool {
        self.model_keys.contains_key(model_id)
    }

    pub fn has_grant(&self, t: &AccessTriple) -> bool {
        self.grants.contains(t)
    }

    pub fn has_request_key(&self, t: &AccessTriple) -> bool {
        self.request_keys.contains_key(t)
    }

    /// Hash over the complete store contents.
    pub fn digest(&self) -> Digest {
        let mut h = Sha256::new();
        for (id, k) in &self.identities {
            h.update(b"I");
            h.update(id.as_bytes());
            h.update(k.expose());
        }
        for (m, k) in &self.model_keys {
            h.update(b"M");
            h.update((m.len() as u32).to_be_bytes());
            h.update(m.as_bytes());
            h.update(k.expose());
        }
        for (m, o) in &self.model_owner {
            h.update(b"O");
            h.update((m.len() as u32).to_be_bytes());
            h.update(m.as_bytes());
            h.update(o.as_bytes());
        }
        let triple = |h: &mut Sha256, t: &AccessTriple| {
            h.update((t.model_id.len() as u32).to_be_bytes());
            h.update(t.model_id.as_bytes());
            h.update(t.enclave.as_bytes());
            h.update(t.user_id.as_bytes());
        };
        for (t, k) in &self.request_keys {
            h.update(b"R");
            triple(&mut h, t);
            h.update(k.expose());
        }
        for t in &self.grants {
            h.update(b"A");
            triple(&mut h, t);
        }
        Digest(h.finalize().into())
    }

    fn identity_key(&self, id: &Digest) -> Result<&SymKey, KsError> {
        self.identities.get(id).ok_or(KsError::NotRegistered)
    }
}

/// A mutation, as recorded in the journal.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub(crate) enum Mutation {
    Register { key: crate::wire::B64 },
    ModelKey { owner: Digest, model_id: String, key: crate::wire::B64 },
    Grant { triple: AccessTriple },
    ReqKey { triple: AccessTriple, key: crate::wire::B64 },
}

impl KeyStoreState {
    fn apply(&mut self, m: &Mutation) -> Result<(), KsError> {
        let key = |b: &crate::wire::B64| SymKey::from_slice(&b.0).map_err(|e| KsError::Journal(e.to_string()));
        match m {
            Mutation::Register { key: k } => {
                let k = key(k)?;
                self.identities.insert(hash_identity(&k), k);
            }
            Mutation::ModelKey { owner, model_id, key: k } => {
                self.model_keys.insert(model_id.clone(), key(k)?);
                self.model_owner.insert(model_id.clone(), *owner);
            }
            Mutation::Grant { triple } => {
                self.grants.insert(triple.clone());
            }
            Mutation::ReqKey { triple, key: k } => {
                self.request_keys.insert(triple.clone(), key(k)?);
            }
        }
        Ok(())
    }
}

/// `(K_M, K_R)` released to an authorized enclave.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProvisionedKeys {
    pub model_key: SymKey,
    pub request_key: SymKey,
}

/// Provisioning parameters. The enclave identity is not a field: it is
/// taken from the report verified while establishing the channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionRequest {
    pub user_id: Digest,
    pub model_id: String,
}

pub const KEYSERVICE_NAME: &str = "teeinfer-keyservice";

/// Code identity of this key service build.
pub fn keyservice_identity() -> CodeIdentity {
    CodeIdentity::new(KEYSERVICE_NAME, env!("CARGO_PKG_VERSION"), "none")
}

/// The measurement `E_K` clients and runtimes should expect.
pub fn keyservice_measurement() -> Measurement {
    measure_code(&keyservice_identity())
}

pub struct KeyService {
    state: Mutex<KeyStoreState>,
    attester: Attester,
    verifier: PlatformVerifier,
    journal: Option<Mutex<Journal>>,
    provision_calls: AtomicU64,
}

impl std::fmt::Debug for KeyService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyService").field("measurement", &self.measurement()).finish_non_exhaustive()
    }
}

impl KeyService {
    pub fn new(attester: Attester, verifier: PlatformVerifier) -> Self {
        KeyService { state: Mutex::new(KeyStoreState::default()), attester, verifier, journal: None, provision_calls: AtomicU64::new(0) }
    }

    /// A key service with this build's measurement on `platform`.
    pub fn on_platform(platform: &PlatformRoot) -> Self {
        Self::new(Attester::new(platform.clone(), keyservice_measurement()), platform.verifier())
    }

    /// Opens (or creates) an append-only journal sealed under the enclave's
    /// sealing key, replays it into the stores, and keeps appending to it.
    pub fn with_journal(attester: Attester, verifier: PlatformVerifier, path: &Path) -> Result<Self, KsError> {
        let (journal, mutations) = Journal::open(path, attester.sealing_key())?;
        let mut state = KeyStoreState::default();
        for m in &mutations {
            state.apply(m)?;
        }
        tracing::info!(records = mutations.len(), "key store restored from journal");
        Ok(KeyService { state: Mutex::new(state), attester, verifier, journal: Some(Mutex::new(journal)), provision_calls: AtomicU64::new(0) })
    }

    pub fn measurement(&self) -> Measurement {
        self.attester.measurement()
    }

    pub fn verifier(&self) -> PlatformVerifier {
        self.verifier
    }

    /// Handshake responder: clients connect without attesting, runtime
    /// enclaves attest (any measurement; authorization happens per triple).
    pub fn responder(&self) -> Responder {
        Responder::new(self.attester.clone(), self.verifier, PeerAuth::Optional(Expectation::Any))
    }

    pub fn snapshot(&self) -> KeyStoreState {
        self.lock().clone()
    }

    pub fn state_digest(&self) -> Digest {
        self.lock().digest()
    }

    pub fn provision_calls(&self) -> u64 {
        self.provision_calls.load(Ordering::SeqCst)
    }

    pub fn flush(&self) -> Result<(), KsError> {
        if let Some(j) = &self.journal {
            j.lock().unwrap_or_else(|e| e.into_inner()).flush()?;
        }
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, KeyStoreState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn commit(&self, state: &mut KeyStoreState, m: Mutation) -> Result<(), KsError> {
        if let Some(j) = &self.journal {
            j.lock().unwrap_or_else(|e| e.into_inner()).append(&m)?;
        }
        state.apply(&m)
    }

    pub fn user_registration(&self, identity_key: &SymKey) -> Result<Digest, KsError> {
        let id = hash_identity(identity_key);
        let mut st = self.lock();
        if st.identities.get(&id) != Some(identity_key) {
            self.commit(&mut st, Mutation::Register { key: crate::wire::B64(identity_key.expose().to_vec()) })?;
        }
        Ok(id)
    }

    fn open_sealed(key: &SymKey, sealed: &AeadEnvelope, purpose: Purpose, id: &Digest) -> Result<Vec<u8>, KsError> {
        aead_decrypt(key, sealed, &context_aad(purpose, "", &id.to_hex())).map_err(|e| match e {
            CryptoError::Integrity => KsError::Unauthorized,
            other => KsError::Malformed(other.to_string()),
        })
    }

    pub fn add_model_key(&self, oid: &Digest, sealed: &AeadEnvelope) -> Result<(), KsError> {
        let mut st = self.lock();
        let k_oid = st.identity_key(oid)?.clone();
        let body = Self::open_sealed(&k_oid, sealed, Purpose::ModelKey, oid)?;
        let (model_id, k_m) = payload::parse_model_key(&body)?;
        // Another owner cannot take over a deposited model id.
        if let Some(owner) = st.model_owner.get(&model_id) {
            if owner != oid {
                return Err(KsError::NotOwner(model_id));
            }
        }
        self.commit(&mut st, Mutation::ModelKey { owner: *oid, model_id, key: crate::wire::B64(k_m.expose().to_vec()) })
    }

    pub fn grant_access(&self, oid: &Digest, sealed: &AeadEnvelope) -> Result<(), KsError> {
        let mut st = self.lock();
        let k_oid = st.identity_key(oid)?.clone();
        let body = Self::open_sealed(&k_oid, sealed, Purpose::Grant, oid)?;
        let triple = payload::parse_grant(&body)?;
        if st.model_owner.get(&triple.model_id) != Some(oid) {
            return Err(KsError::NotOwner(triple.model_id));
        }
        if st.grants.contains(&triple) {
            return Ok(());
        }
        self.commit(&mut st, Mutation::Grant { triple })
    }

    pub fn add_req_key(&self, uid: &Digest, sealed: &AeadEnvelope) -> Result<(), KsError> {
        let mut st = self.lock();
        let k_uid = st.identity_key(uid)?.clone();
        let body = Self::open_sealed(&k_uid, sealed, Purpose::ReqKey, uid)?;
        let (model_id, enclave, k_r) = payload::parse_req_key(&body)?;
        let triple = AccessTriple { model_id, enclave, user_id: *uid };
        self.commit(&mut st, Mutation::ReqKey { triple, key: crate::wire::B64(k_r.expose().to_vec()) })
    }

    /// Releases `(K_M, K_R)` iff the triple formed from the request and the
    /// channel peer's verified measurement is granted and has a request key.
    pub fn key_provisioning(&self, req: &ProvisionRequest, channel: &SecureChannel) -> Result<ProvisionedKeys, KsError> {
        self.provision_calls.fetch_add(1, Ordering::SeqCst);
        let enclave = channel.peer_measurement().ok_or(KsError::Denied)?;
        let triple = AccessTriple { model_id: req.model_id.clone(), enclave, user_id: req.user_id };
        let st = self.lock();
        match (st.grants.contains(&triple), st.request_keys.get(&triple), st.model_keys.get(&triple.model_id)) {
            (true, Some(k_r), Some(k_m)) => Ok(ProvisionedKeys { model_key: k_m.clone(), request_key: k_r.clone() }),
            _ => Err(KsError::Denied),
        }
    }
}

#[cfg(test)]
mod tests;
