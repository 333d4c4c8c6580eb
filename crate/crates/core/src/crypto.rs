// SPDX-License-Identifier: Apache-2.0

//! Authenticated encryption, hashing and session-key derivation.
//!
//! Every confidential byte that leaves a trusted boundary travels inside an
//! [`AeadEnvelope`] produced by [`aead_encrypt`] (AES-256-GCM). Nonces are
//! a 4-byte random prefix followed by an 8-byte counter; the counter is kept
//! per key in a process-wide registry so that independent copies of the same
//! key never reuse a nonce within one process.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes256Gcm, KeyInit, Nonce, Tag};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// Bytes added by the AEAD itself: nonce plus tag.
pub const AEAD_OVERHEAD: usize = NONCE_LEN + TAG_LEN;
/// Bytes added by the wire encoding: AEAD overhead plus the 4-byte length field.
pub const WIRE_OVERHEAD: usize = AEAD_OVERHEAD + 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("integrity check failed")]
    Integrity,
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("nonce space exhausted for this key")]
    NonceExhausted,
    #[error("empty shared secret")]
    EmptySecret,
}

/// A 256-bit symmetric key.
///
/// `Debug` never prints key material.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SymKey([u8; KEY_LEN]);

impl SymKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut bytes);
        SymKey(bytes)
    }

    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        SymKey(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::Malformed(format!("key must be {KEY_LEN} bytes, got {}", bytes.len())))?;
        Ok(SymKey(arr))
    }

    /// Raw key bytes. Callers are responsible for keeping them inside a
    /// trusted boundary or a sealed envelope.
    pub fn expose(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SymKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymKey(..)")
    }
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let v = hex::decode(s.trim()).map_err(|e| CryptoError::Malformed(format!("bad hex digest: {e}")))?;
        Self::from_slice(&v)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CryptoError::Malformed(format!("digest must be 32 bytes, got {}", bytes.len())))?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn sha256(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Identity of a registered key holder: SHA-256 over the raw key bytes.
pub fn hash_identity(key: &SymKey) -> Digest {
    sha256(key.expose())
}

/// Authenticated-encryption container.
///
/// Wire format: `nonce(12) ‖ u32-BE ciphertext length ‖ ciphertext ‖ tag(16)`.
/// The associated data is never serialized; both ends re-derive it.
#[derive(Clone, PartialEq, Eq)]
pub struct AeadEnvelope {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl fmt::Debug for AeadEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AeadEnvelope")
            .field("nonce", &hex::encode(self.nonce))
            .field("ciphertext_len", &self.ciphertext.len())
            .finish()
    }
}

impl AeadEnvelope {
    pub fn encoded_len(&self) -> usize {
        self.ciphertext.len() + WIRE_OVERHEAD
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    /// Parses one envelope and requires the input to contain nothing else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let (env, used) = Self::parse_prefix(bytes)?;
        if used != bytes.len() {
            return Err(CryptoError::Malformed(format!("{} trailing bytes after envelope", bytes.len() - used)));
        }
        Ok(env)
    }

    /// Parses one envelope from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn parse_prefix(bytes: &[u8]) -> Result<(Self, usize), CryptoError> {
        if bytes.len() < NONCE_LEN + 4 {
            return Err(CryptoError::Malformed("envelope shorter than header".into()));
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&bytes[..NONCE_LEN]);
        let len = u32::from_be_bytes(bytes[NONCE_LEN..NONCE_LEN + 4].try_into().unwrap()) as usize;
        let body = NONCE_LEN + 4;
        let end = body
            .checked_add(len)
            .and_then(|e| e.checked_add(TAG_LEN))
            .ok_or_else(|| CryptoError::Malformed("length overflow".into()))?;
        if bytes.len() < end {
            return Err(CryptoError::Malformed(format!(
                "envelope declares {len} ciphertext bytes but only {} available",
                bytes.len().saturating_sub(body + TAG_LEN)
            )));
        }
        let ciphertext = bytes[body..body + len].to_vec();
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&bytes[body + len..end]);
        Ok((AeadEnvelope { nonce, ciphertext, tag }, end))
    }
}

struct NonceSeq {
    prefix: [u8; 4],
    next: AtomicU64,
}

impl NonceSeq {
    fn fresh() -> Self {
        let mut prefix = [0u8; 4];
        OsRng.fill_bytes(&mut prefix);
        NonceSeq { prefix, next: AtomicU64::new(0) }
    }

    fn take(&self) -> Result<[u8; NONCE_LEN], CryptoError> {
        let counter = self
            .next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| c.checked_add(1))
            .map_err(|_| CryptoError::NonceExhausted)?;
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..4].copy_from_slice(&self.prefix);
        nonce[4..].copy_from_slice(&counter.to_be_bytes());
        Ok(nonce)
    }
}

type NonceRegistry = Mutex<HashMap<Digest, Arc<NonceSeq>>>;

fn registry() -> &'static NonceRegistry {
    static REGISTRY: OnceLock<NonceRegistry> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

// The registry is indexed by a domain-separated hash, never by the raw key.
fn registry_slot(key: &SymKey) -> Arc<NonceSeq> {
    let mut h = Sha256::new();
    h.update(b"teeinfer/nonce-registry");
    h.update(key.expose());
    let id = Digest(h.finalize().into());
    let mut reg = registry().lock().unwrap_or_else(|e| e.into_inner());
    reg.entry(id).or_insert_with(|| Arc::new(NonceSeq::fresh())).clone()
}

#[cfg(test)]
pub(crate) fn force_nonce_counter(key: &SymKey, value: u64) {
    registry_slot(key).next.store(value, Ordering::SeqCst);
}

pub fn aead_encrypt(key: &SymKey, plaintext: &[u8], aad: &[u8]) -> Result<AeadEnvelope, CryptoError> {
    let nonce = registry_slot(key).take()?;
    let cipher = Aes256Gcm::new(key.expose().into());
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), aad, &mut buf)
        .map_err(|_| CryptoError::Malformed("plaintext too long for AES-GCM".into()))?;
    Ok(AeadEnvelope { nonce, ciphertext: buf, tag: tag.into() })
}

pub fn aead_decrypt(key: &SymKey, env: &AeadEnvelope, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes256Gcm::new(key.expose().into());
    let mut buf = env.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(Nonce::from_slice(&env.nonce), aad, &mut buf, Tag::from_slice(&env.tag))
        .map_err(|_| CryptoError::Integrity)?;
    Ok(buf)
}

/// Derives the two directional keys of a channel from a key-agreement
/// secret and the handshake transcript. Returns `(initiator_to_responder,
/// responder_to_initiator)`.
pub fn derive_session_keys(shared_secret: &[u8], transcript: &[u8]) -> Result<(SymKey, SymKey), CryptoError> {
    if shared_secret.is_empty() {
        return Err(CryptoError::EmptySecret);
    }
    let salt = sha256(transcript);
    let hk = Hkdf::<Sha256>::new(Some(salt.as_bytes()), shared_secret);
    let mut i2r = [0u8; KEY_LEN];
    let mut r2i = [0u8; KEY_LEN];
    hk.expand(b"teeinfer session initiator->responder", &mut i2r)
        .expect("32 bytes is a valid HKDF length");
    hk.expand(b"teeinfer session responder->initiator", &mut r2i)
        .expect("32 bytes is a valid HKDF length");
    Ok((SymKey(i2r), SymKey(r2i)))
}

/// Domain labels bound into the associated data of every envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Model,
    Request,
    Result,
    ModelKey,
    Grant,
    ReqKey,
    Channel,
    Journal,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Model => "model",
            Purpose::Request => "request",
            Purpose::Result => "result",
            Purpose::ModelKey => "model_key",
            Purpose::Grant => "grant",
            Purpose::ReqKey => "req_key",
            Purpose::Channel => "channel",
            Purpose::Journal => "journal",
        }
    }
}

/// `"<purpose>|<model_id>|<user_id>"`; `-` marks a field that is not known
/// from the message context.
pub fn context_aad(purpose: Purpose, model_id: &str, user_id: &str) -> Vec<u8> {
    let m = if model_id.is_empty() { "-" } else { model_id };
    let u = if user_id.is_empty() { "-" } else { user_id };
    format!("{}|{}|{}", purpose.as_str(), m, u).into_bytes()
}

/// Request and result envelopes also bind the per-(user, model) sequence number.
pub fn sequenced_aad(purpose: Purpose, model_id: &str, user_id: &Digest, seq: u64) -> Vec<u8> {
    let mut aad = context_aad(purpose, model_id, &user_id.to_hex());
    aad.extend_from_slice(format!("|{seq}").as_bytes());
    aad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::HashSet;

    fn key(seed: u64) -> SymKey {
        SymKey::generate(&mut ChaCha20Rng::seed_from_u64(seed))
    }

    #[test]
    fn sha256_of_zero_key_is_pinned() {
        // Computed with Python's hashlib.
        let id = hash_identity(&SymKey::from_bytes([0u8; 32]));
        assert_eq!(id.to_hex(), "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925");
        let mut seq = [0u8; 32];
        for (i, b) in seq.iter_mut().enumerate() {
            *b = i as u8;
        }
        assert_eq!(
            hash_identity(&SymKey::from_bytes(seq)).to_hex(),
            "630dcd2966c4336691125448bbb25b4ff412a49c732db2c8abc1b8581bd710dd"
        );
    }

    #[test]
    fn aes_gcm_known_answer() {
        // Zero key, zero nonce, empty message; tag from the `cryptography` package.
        let k = SymKey::from_bytes([0u8; 32]);
        let env = AeadEnvelope { nonce: [0u8; 12], ciphertext: vec![], tag: hex::decode("530f8afbc74536b9a963b4f1c4cb738b").unwrap().try_into().unwrap() };
        assert_eq!(aead_decrypt(&k, &env, b"").unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn round_trip_and_lengths() {
        let k = key(1);
        let env = aead_encrypt(&k, b"hello world", b"ctx").unwrap();
        assert_eq!(env.ciphertext.len(), 11);
        assert_eq!(aead_decrypt(&k, &env, b"ctx").unwrap(), b"hello world");
        let wire = env.to_bytes();
        assert_eq!(wire.len(), 11 + WIRE_OVERHEAD);
        assert_eq!(AeadEnvelope::from_bytes(&wire).unwrap(), env);
    }

    #[test]
    fn mbnet_sized_blob_framing() {
        let k = key(2);
        let blob = vec![7u8; 17 * 1024 * 1024];
        let env = aead_encrypt(&k, &blob, b"model|mbnet|-").unwrap();
        assert_eq!(env.ciphertext.len(), blob.len());
        // 28 bytes of AEAD framing, as measured with a reference AES-GCM.
        assert_eq!(env.nonce.len() + env.tag.len(), 28);
        assert_eq!(env.to_bytes().len(), blob.len() + 28 + 4);
    }

    #[test]
    fn wrong_aad_or_key_is_integrity_error() {
        let k = key(3);
        let env = aead_encrypt(&k, b"payload", b"a").unwrap();
        assert_eq!(aead_decrypt(&k, &env, b"b"), Err(CryptoError::Integrity));
        assert_eq!(aead_decrypt(&key(4), &env, b"a"), Err(CryptoError::Integrity));
        let mut flipped = env.clone();
        flipped.ciphertext[0] ^= 1;
        assert_eq!(aead_decrypt(&k, &flipped, b"a"), Err(CryptoError::Integrity));
    }

    #[test]
    fn malformed_is_distinct_from_integrity() {
        assert!(matches!(AeadEnvelope::from_bytes(&[0u8; 5]), Err(CryptoError::Malformed(_))));
        let env = aead_encrypt(&key(5), b"x", b"").unwrap();
        let mut wire = env.to_bytes();
        wire.push(0);
        assert!(matches!(AeadEnvelope::from_bytes(&wire), Err(CryptoError::Malformed(_))));
        wire.truncate(10);
        assert!(matches!(AeadEnvelope::from_bytes(&wire), Err(CryptoError::Malformed(_))));
    }

    #[test]
    fn nonce_exhaustion_is_a_hard_failure() {
        let k = key(6);
        force_nonce_counter(&k, u64::MAX - 1);
        assert!(aead_encrypt(&k, b"last", b"").is_ok());
        assert_eq!(aead_encrypt(&k, b"one more", b""), Err(CryptoError::NonceExhausted));
    }

    #[test]
    fn nonces_unique_across_key_copies_and_threads() {
        let k = key(7);
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let k = k.clone();
                std::thread::spawn(move || (0..500).map(|_| aead_encrypt(&k, b"m", b"").unwrap().nonce).collect::<Vec<_>>())
            })
            .collect();
        let mut seen = HashSet::new();
        for h in handles {
            for n in h.join().unwrap() {
                assert!(seen.insert(n), "nonce reused");
            }
        }
        // A copy rebuilt from raw bytes shares the same counter.
        let copy = SymKey::from_bytes(*k.expose());
        assert!(seen.insert(aead_encrypt(&copy, b"m", b"").unwrap().nonce));
    }

    #[test]
    fn session_keys() {
        assert_eq!(derive_session_keys(b"", b"t"), Err(CryptoError::EmptySecret));
        let a = derive_session_keys(b"secret", b"transcript").unwrap();
        let b = derive_session_keys(b"secret", b"transcript").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);
        let c = derive_session_keys(b"secret", b"transcripu").unwrap();
        assert_ne!(a.0, c.0);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn debug_never_prints_key_bytes() {
        let k = SymKey::from_bytes([0xab; 32]);
        assert!(!format!("{k:?}").contains("ab"));
    }

    #[test]
    fn aad_layout() {
        assert_eq!(context_aad(Purpose::Model, "m0", ""), b"model|m0|-");
        let u = Digest([1u8; 32]);
        let aad = sequenced_aad(Purpose::Request, "m0", &u, 7);
        assert_eq!(aad, format!("request|m0|{}|7", u.to_hex()).into_bytes());
    }

    proptest::proptest! {
        #[test]
        fn prop_round_trip(pt in proptest::collection::vec(proptest::num::u8::ANY, 0..512), aad in proptest::collection::vec(proptest::num::u8::ANY, 0..64)) {
            let k = key(11);
            let env = aead_encrypt(&k, &pt, &aad).unwrap();
            proptest::prop_assert_eq!(aead_decrypt(&k, &env, &aad).unwrap(), pt);
        }

        #[test]
        fn prop_transcript_sensitivity(secret in proptest::collection::vec(proptest::num::u8::ANY, 1..64),
                                       t in proptest::collection::vec(proptest::num::u8::ANY, 1..64),
                                       idx in 0usize..64, bit in 0u8..8) {
            let mut t2 = t.clone();
            let i = idx % t2.len();
            t2[i] ^= 1 << bit;
            let a = derive_session_keys(&secret, &t).unwrap();
            let b = derive_session_keys(&secret, &t2).unwrap();
            proptest::prop_assert_ne!(a.0, b.0);
            proptest::prop_assert_ne!(a.1, b.1);
        }
    }

    #[test]
    fn distinct_keys_distinct_ids() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut ids = HashSet::new();
        for _ in 0..10_000 {
            assert!(ids.insert(hash_identity(&SymKey::generate(&mut rng))));
        }
    }
}
