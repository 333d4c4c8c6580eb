// SPDX-License-Identifier: Apache-2.0

//! Model-owner and user clients.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::{Measurement, PlatformVerifier};
use crate::crypto::{AeadEnvelope, CryptoError, Digest, SymKey};
use crate::keyservice::payload::{seal_grant, seal_model_key, seal_req_key};
use crate::keyservice::{KsClient, KsClientError, KsTransport};
use crate::runtime::backend::InferenceBackend;
use crate::runtime::model::{encode_input, encode_model_file, InferenceOutput, LinearModel};
use crate::runtime::storage::ModelSink;
use crate::runtime::{open_result, seal_request, Enclave, InferenceRequest, InvocationPath, RuntimeError};
use crate::scalar::Scalar;
use crate::wire::B64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("access denied")]
    Denied,
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("gateway unavailable: {0}")]
    Unavailable(String),
}

impl From<RuntimeError> for GatewayError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Denied => GatewayError::Denied,
            other => GatewayError::Rejected(other.to_string()),
        }
    }
}

/// Anything that accepts sealed inference requests: an enclave, a router,
/// or an HTTP endpoint.
pub trait InferenceGateway: Send + Sync {
    fn submit(&self, req: &InferenceRequest) -> Result<(AeadEnvelope, InvocationPath), GatewayError>;
}

impl<B: InferenceBackend> InferenceGateway for Enclave<B> {
    fn submit(&self, req: &InferenceRequest) -> Result<(AeadEnvelope, InvocationPath), GatewayError> {
        let (env, outcome) = self.invoke(req)?;
        Ok((env, outcome.path))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error(transparent)]
    KeyService(#[from] KsClientError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("result failed integrity check")]
    ResultIntegrity,
    #[error("no request key for model {0} on that enclave")]
    NotEnrolled(String),
    #[error("wallet: {0}")]
    Wallet(String),
}

/// Connects to a key service, aborting unless it attests as `expected`.
pub fn connect_keyservice<R: RngCore + CryptoRng>(
    transport: Arc<dyn KsTransport>,
    rng: &mut R,
    verifier: PlatformVerifier,
    expected: Measurement,
) -> Result<KsClient, ClientError> {
    Ok(KsClient::connect(transport, rng, verifier, expected, None)?)
}

pub struct OwnerContext {
    identity_key: SymKey,
    oid: Digest,
    model_keys: BTreeMap<String, SymKey>,
}

impl OwnerContext {
    /// Generates a long-term key and registers it.
    pub fn register<R: RngCore + CryptoRng>(ks: &mut KsClient, rng: &mut R) -> Result<Self, ClientError> {
        let identity_key = SymKey::generate(rng);
        let oid = ks.register(&identity_key)?;
        Ok(OwnerContext { identity_key, oid, model_keys: BTreeMap::new() })
    }

    pub fn oid(&self) -> Digest {
        self.oid
    }

    pub fn model_ids(&self) -> impl Iterator<Item = &str> {
        self.model_keys.keys().map(String::as_str)
    }

    /// Encrypts a model under a fresh `K_M`, uploads it and deposits `K_M`.
    pub fn publish_model<T: Scalar, R: RngCore + CryptoRng>(
        &mut self,
        ks: &mut KsClient,
        rng: &mut R,
        sink: &dyn ModelSink,
        model: &LinearModel<T>,
    ) -> Result<(), ClientError> {
        let k_m = SymKey::generate(rng);
        sink.upload(&model.model_id, &encode_model_file(model, &k_m)?)?;
        ks.add_model_key(self.oid, &seal_model_key(&self.identity_key, &self.oid, &model.model_id, &k_m)?)?;
        self.model_keys.insert(model.model_id.clone(), k_m);
        Ok(())
    }

    /// Serializes the context for the owner's own storage.
    pub fn to_wallet(&self) -> String {
        let w = OwnerWallet {
            identity_key: B64(self.identity_key.expose().to_vec()),
            oid: self.oid,
            model_keys: self.model_keys.iter().map(|(m, k)| (m.clone(), B64(k.expose().to_vec()))).collect(),
        };
        serde_json::to_string_pretty(&w).expect("wallet serializes")
    }

    pub fn from_wallet(json: &str) -> Result<Self, ClientError> {
        let w: OwnerWallet = serde_json::from_str(json).map_err(|e| ClientError::Wallet(e.to_string()))?;
        let mut model_keys = BTreeMap::new();
        for (m, k) in w.model_keys {
            model_keys.insert(m, SymKey::from_slice(&k.0)?);
        }
        Ok(OwnerContext { identity_key: SymKey::from_slice(&w.identity_key.0)?, oid: w.oid, model_keys })
    }

    pub fn grant(&self, ks: &mut KsClient, model_id: &str, enclave: &Measurement, uid: &Digest) -> Result<(), ClientError> {
        Ok(ks.grant_access(self.oid, &seal_grant(&self.identity_key, &self.oid, model_id, enclave, uid)?)?)
    }
}

/// Registers an owner, publishes every model and grants each
/// `(enclave, user)` pair access to every model.
pub fn owner_setup<T: Scalar, R: RngCore + CryptoRng>(
    ks: &mut KsClient,
    rng: &mut R,
    sink: &dyn ModelSink,
    models: &[LinearModel<T>],
    grants: &[(Measurement, Digest)],
) -> Result<OwnerContext, ClientError> {
    let mut owner = OwnerContext::register(ks, rng)?;
    for m in models {
        owner.publish_model(ks, rng, sink, m)?;
        for (es, uid) in grants {
            owner.grant(ks, &m.model_id, es, uid)?;
        }
    }
    Ok(owner)
}

#[derive(Serialize, Deserialize)]
struct OwnerWallet {
    identity_key: B64,
    oid: Digest,
    model_keys: BTreeMap<String, B64>,
}

#[derive(Serialize, Deserialize)]
struct WalletRequestKey {
    model_id: String,
    enclave: String,
    key: B64,
}

#[derive(Serialize, Deserialize)]
struct UserWallet {
    identity_key: B64,
    uid: Digest,
    request_keys: Vec<WalletRequestKey>,
    seq: BTreeMap<String, u64>,
}

pub struct UserContext {
    identity_key: SymKey,
    uid: Digest,
    request_keys: BTreeMap<(String, Measurement), SymKey>,
    seq: BTreeMap<String, u64>,
}

impl UserContext {
    pub fn register<R: RngCore + CryptoRng>(ks: &mut KsClient, rng: &mut R) -> Result<Self, ClientError> {
        let identity_key = SymKey::generate(rng);
        let uid = ks.register(&identity_key)?;
        Ok(UserContext { identity_key, uid, request_keys: BTreeMap::new(), seq: BTreeMap::new() })
    }

    pub fn uid(&self) -> Digest {
        self.uid
    }

    /// Generates a request key for `(model, enclave)` and deposits it.
    pub fn enroll<R: RngCore + CryptoRng>(&mut self, ks: &mut KsClient, rng: &mut R, model_id: &str, enclave: Measurement) -> Result<(), ClientError> {
        let k_r = SymKey::generate(rng);
        ks.add_req_key(self.uid, &seal_req_key(&self.identity_key, &self.uid, model_id, &enclave, &k_r)?)?;
        self.request_keys.insert((model_id.to_owned(), enclave), k_r);
        Ok(())
    }

    pub fn to_wallet(&self) -> String {
        let w = UserWallet {
            identity_key: B64(self.identity_key.expose().to_vec()),
            uid: self.uid,
            request_keys: self
                .request_keys
                .iter()
                .map(|((m, es), k)| WalletRequestKey { model_id: m.clone(), enclave: es.to_hex(), key: B64(k.expose().to_vec()) })
                .collect(),
            seq: self.seq.clone(),
        };
        serde_json::to_string_pretty(&w).expect("wallet serializes")
    }

    pub fn from_wallet(json: &str) -> Result<Self, ClientError> {
        let w: UserWallet = serde_json::from_str(json).map_err(|e| ClientError::Wallet(e.to_string()))?;
        let mut request_keys = BTreeMap::new();
        for e in w.request_keys {
            request_keys.insert((e.model_id, Measurement::from_hex(&e.enclave)?), SymKey::from_slice(&e.key.0)?);
        }
        Ok(UserContext { identity_key: SymKey::from_slice(&w.identity_key.0)?, uid: w.uid, request_keys, seq: w.seq })
    }

    fn next_seq(&mut self, model_id: &str) -> u64 {
        let s = self.seq.entry(model_id.to_owned()).or_insert(0);
        *s += 1;
        *s
    }

    /// Seals `input` for the enclave `enclave` serving `model_id`.
    pub fn build_request<T: Scalar>(&mut self, model_id: &str, enclave: Measurement, keyservice_addr: &str, input: &[T]) -> Result<InferenceRequest, ClientError> {
        let k_r = self
            .request_keys
            .get(&(model_id.to_owned(), enclave))
            .ok_or_else(|| ClientError::NotEnrolled(model_id.to_owned()))?
            .clone();
        let seq = self.next_seq(model_id);
        Ok(InferenceRequest {
            user_id: self.uid,
            model_id: model_id.to_owned(),
            keyservice_addr: keyservice_addr.to_owned(),
            payload: seal_request(&k_r, model_id, &self.uid, seq, &encode_input(input))?,
            seq,
        })
    }

    pub fn open_response(&self, req: &InferenceRequest, enclave: Measurement, env: &AeadEnvelope) -> Result<InferenceOutput, ClientError> {
        let k_r = self
            .request_keys
            .get(&(req.model_id.clone(), enclave))
            .ok_or_else(|| ClientError::NotEnrolled(req.model_id.clone()))?;
        let pt = open_result(k_r, &req.model_id, &self.uid, req.seq, env).map_err(|_| ClientError::ResultIntegrity)?;
        Ok(InferenceOutput::from_bytes(&pt)?)
    }

    /// Seals, submits and opens one request.
    pub fn user_request<T: Scalar>(
        &mut self,
        gateway: &dyn InferenceGateway,
        model_id: &str,
        enclave: Measurement,
        keyservice_addr: &str,
        input: &[T],
    ) -> Result<(InferenceOutput, InvocationPath), ClientError> {
        let req = self.build_request(model_id, enclave, keyservice_addr, input)?;
        let (env, path) = gateway.submit(&req)?;
        Ok((self.open_response(&req, enclave, &env)?, path))
    }
}
