// SPDX-License-Identifier: Apache-2.0

//! Simulated trusted-hardware layer.
//!
//! A [`PlatformRoot`] stands in for the hardware vendor's provisioning key:
//! it signs [`AttestationReport`]s that bind an enclave [`Measurement`] to an
//! ephemeral key-agreement share and a verifier-chosen nonce. Verifiers hold
//! only the [`PlatformVerifier`].
//!
//! Channels are set up with a two- or three-message handshake:
//!
//! ```text
//! initiator                                    responder
//!   hello   {pubkey_i, nonce_i}          ->
//!                                        <-    {pubkey_r, nonce_r, report(M_r, pubkey_r, nonce_i)}
//!   finish  {pubkey_i, nonce_r, [report(M_i, pubkey_i, nonce_r)]}  ->
//! ```
//!
//! The finish message carries a report only for mutual attestation. Both
//! sides derive directional keys from the X25519 secret and the transcript.
//! A [`SecureChannel`] has no public constructor: the only way to obtain
//! one is to complete a handshake whose reports verified.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::crypto::{
    aead_decrypt, aead_encrypt, context_aad, derive_session_keys, sha256, AeadEnvelope, CryptoError, Digest,
    Purpose, SymKey,
};
use crate::wire::{b64_decode, b64_encode, put_str16, Reader};

/// Enclave identity: a digest over the canonical [`CodeIdentity`] encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Measurement(pub Digest);

impl Measurement {
    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }

    pub fn to_hex(&self) -> String {
        self.0.to_hex()
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Digest::from_hex(s).map(Measurement)
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Measurement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Measurement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Digest::deserialize(d).map(Measurement)
    }
}

/// Everything that determines the enclave's code and its compiled-in
/// configuration. Flags are kept sorted so equal identities encode equally.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeIdentity {
    pub runtime_name: String,
    pub runtime_version: String,
    pub backend_name: String,
    #[serde(default)]
    pub config_flags: BTreeMap<String, String>,
}

impl CodeIdentity {
    pub fn new(runtime_name: impl Into<String>, runtime_version: impl Into<String>, backend_name: impl Into<String>) -> Self {
        CodeIdentity {
            runtime_name: runtime_name.into(),
            runtime_version: runtime_version.into(),
            backend_name: backend_name.into(),
            config_flags: BTreeMap::new(),
        }
    }

    pub fn with_flag(mut self, flag: impl Into<String>, value: impl ToString) -> Self {
        self.config_flags.insert(flag.into(), value.to_string());
        self
    }

    pub fn flag(&self, flag: &str) -> Option<&str> {
        self.config_flags.get(flag).map(String::as_str)
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = b"teeinfer/code-identity/v1".to_vec();
        put_str16(&mut out, &self.runtime_name);
        put_str16(&mut out, &self.runtime_version);
        put_str16(&mut out, &self.backend_name);
        out.extend_from_slice(&(self.config_flags.len() as u32).to_be_bytes());
        for (k, v) in &self.config_flags {
            put_str16(&mut out, k);
            put_str16(&mut out, v);
        }
        out
    }
}

pub fn measure_code(identity: &CodeIdentity) -> Measurement {
    Measurement(sha256(&identity.canonical_bytes()))
}

/// The simulated platform signing key.
#[derive(Clone)]
pub struct PlatformRoot {
    signing: SigningKey,
}

impl fmt::Debug for PlatformRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlatformRoot").field("verifier", &self.verifier()).finish()
    }
}

impl PlatformRoot {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        PlatformRoot { signing: SigningKey::generate(rng) }
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        PlatformRoot { signing: SigningKey::from_bytes(&seed) }
    }

    pub fn verifier(&self) -> PlatformVerifier {
        PlatformVerifier { key: self.signing.verifying_key() }
    }

    pub fn generate_report(&self, measurement: Measurement, channel_pubkey: &[u8], nonce: [u8; 16]) -> AttestationReport {
        let msg = report_message(&measurement, channel_pubkey, &nonce);
        let sig = self.signing.sign(&msg);
        AttestationReport { measurement, channel_pubkey: channel_pubkey.to_vec(), nonce, platform_sig: sig.to_bytes() }
    }

    /// Key bound to this platform and one measurement, for sealing enclave
    /// state at rest.
    pub fn sealing_key(&self, measurement: &Measurement) -> SymKey {
        let hk = Hkdf::<Sha256>::new(Some(b"teeinfer/sealing"), self.signing.as_bytes());
        let mut out = [0u8; 32];
        hk.expand(measurement.as_bytes(), &mut out).expect("valid HKDF length");
        SymKey::from_bytes(out)
    }
}

/// Public half of the platform key, distributed to every verifier.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PlatformVerifier {
    key: VerifyingKey,
}

impl fmt::Debug for PlatformVerifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PlatformVerifier({})", &hex::encode(self.key.as_bytes())[..16])
    }
}

impl PlatformVerifier {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::Malformed("verifier key must be 32 bytes".into()))?;
        VerifyingKey::from_bytes(&arr)
            .map(|key| PlatformVerifier { key })
            .map_err(|e| CryptoError::Malformed(format!("bad verifier key: {e}")))
    }
}

fn report_message(measurement: &Measurement, channel_pubkey: &[u8], nonce: &[u8; 16]) -> Vec<u8> {
    let mut msg = b"teeinfer/report/v1".to_vec();
    msg.extend_from_slice(measurement.as_bytes());
    msg.extend_from_slice(&(channel_pubkey.len() as u16).to_be_bytes());
    msg.extend_from_slice(channel_pubkey);
    msg.extend_from_slice(nonce);
    msg
}

#[derive(Clone, PartialEq, Eq)]
pub struct AttestationReport {
    pub measurement: Measurement,
    pub channel_pubkey: Vec<u8>,
    pub nonce: [u8; 16],
    pub platform_sig: [u8; 64],
}

impl fmt::Debug for AttestationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationReport")
            .field("measurement", &self.measurement)
            .field("nonce", &hex::encode(self.nonce))
            .finish_non_exhaustive()
    }
}

impl AttestationReport {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 2 + self.channel_pubkey.len() + 16 + 64);
        out.extend_from_slice(self.measurement.as_bytes());
        out.extend_from_slice(&(self.channel_pubkey.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.channel_pubkey);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.platform_sig);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let bad = || CryptoError::Malformed("truncated attestation report".into());
        let mut r = Reader::new(bytes);
        let measurement = Measurement(Digest(r.array::<32>().ok_or_else(bad)?));
        let n = r.u16_be().ok_or_else(bad)? as usize;
        let channel_pubkey = r.take(n).ok_or_else(bad)?.to_vec();
        let nonce = r.array::<16>().ok_or_else(bad)?;
        let platform_sig = r.array::<64>().ok_or_else(bad)?;
        if !r.is_done() {
            return Err(CryptoError::Malformed("trailing bytes after attestation report".into()));
        }
        Ok(AttestationReport { measurement, channel_pubkey, nonce, platform_sig })
    }
}

/// What a verifier requires of the peer's measurement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expectation {
    Any,
    Exact(Measurement),
}

impl Expectation {
    pub fn admits(&self, m: &Measurement) -> bool {
        match self {
            Expectation::Any => true,
            Expectation::Exact(e) => e == m,
        }
    }
}

pub fn verify_report(verifier: &PlatformVerifier, report: &AttestationReport, expected: &Expectation) -> bool {
    let msg = report_message(&report.measurement, &report.channel_pubkey, &report.nonce);
    let sig = Signature::from_bytes(&report.platform_sig);
    verifier.key.verify(&msg, &sig).is_ok() && expected.admits(&report.measurement)
}

/// An enclave's capability to attest: its measurement plus access to the
/// platform that signs its reports.
#[derive(Clone, Debug)]
pub struct Attester {
    platform: PlatformRoot,
    measurement: Measurement,
}

impl Attester {
    pub fn new(platform: PlatformRoot, measurement: Measurement) -> Self {
        Attester { platform, measurement }
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn report(&self, channel_pubkey: &[u8], nonce: [u8; 16]) -> AttestationReport {
        self.platform.generate_report(self.measurement, channel_pubkey, nonce)
    }

    pub fn sealing_key(&self) -> SymKey {
        self.platform.sealing_key(&self.measurement)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("peer did not present an attestation report")]
    ReportMissing,
    #[error("attestation report rejected")]
    ReportRejected,
    #[error("report does not bind this handshake")]
    BindingMismatch,
    #[error("malformed handshake message: {0}")]
    Malformed(String),
    #[error("key agreement failed")]
    KeyAgreement,
}

/// One handshake message. JSON form: `{"report": b64, "pubkey": b64, "nonce": b64}`
/// with `report` omitted when absent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandshakeMessage {
    pub pubkey: [u8; 32],
    pub nonce: [u8; 16],
    pub report: Option<AttestationReport>,
}

#[derive(Serialize, Deserialize)]
struct HandshakeJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    report: Option<String>,
    pubkey: String,
    nonce: String,
}

impl Serialize for HandshakeMessage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        HandshakeJson {
            report: self.report.as_ref().map(|r| b64_encode(&r.to_bytes())),
            pubkey: b64_encode(&self.pubkey),
            nonce: b64_encode(&self.nonce),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for HandshakeMessage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let j = HandshakeJson::deserialize(d)?;
        let pubkey = b64_decode(&j.pubkey)
            .map_err(D::Error::custom)?
            .try_into()
            .map_err(|_| D::Error::custom("pubkey must be 32 bytes"))?;
        let nonce = b64_decode(&j.nonce)
            .map_err(D::Error::custom)?
            .try_into()
            .map_err(|_| D::Error::custom("nonce must be 16 bytes"))?;
        let report = match j.report {
            Some(r) => Some(AttestationReport::from_bytes(&b64_decode(&r).map_err(D::Error::custom)?).map_err(D::Error::custom)?),
            None => None,
        };
        Ok(HandshakeMessage { pubkey, nonce, report })
    }
}

impl HandshakeMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("handshake message serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, HandshakeError> {
        serde_json::from_str(s).map_err(|e| HandshakeError::Malformed(e.to_string()))
    }
}

/// An established, attested channel. Sends and receives are sequenced, so
/// a replayed or reordered record fails authentication.
pub struct SecureChannel {
    send_key: SymKey,
    recv_key: SymKey,
    peer_report: Option<AttestationReport>,
    session_id: Digest,
    send_seq: u64,
    recv_seq: u64,
}

impl fmt::Debug for SecureChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecureChannel")
            .field("session_id", &self.session_id)
            .field("peer", &self.peer_measurement())
            .finish_non_exhaustive()
    }
}

impl SecureChannel {
    pub fn peer_measurement(&self) -> Option<Measurement> {
        self.peer_report.as_ref().map(|r| r.measurement)
    }

    pub fn peer_report(&self) -> Option<&AttestationReport> {
        self.peer_report.as_ref()
    }

    pub fn session_id(&self) -> Digest {
        self.session_id
    }

    fn aad(&self, seq: u64) -> Vec<u8> {
        let mut aad = context_aad(Purpose::Channel, "", &self.session_id.to_hex());
        aad.extend_from_slice(format!("|{seq}").as_bytes());
        aad
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Result<AeadEnvelope, CryptoError> {
        let env = aead_encrypt(&self.send_key, plaintext, &self.aad(self.send_seq))?;
        self.send_seq += 1;
        Ok(env)
    }

    pub fn open(&mut self, env: &AeadEnvelope) -> Result<Vec<u8>, CryptoError> {
        let pt = aead_decrypt(&self.recv_key, env, &self.aad(self.recv_seq))?;
        self.recv_seq += 1;
        Ok(pt)
    }
}

fn transcript_bytes(pk_i: &[u8; 32], n_i: &[u8; 16], pk_r: &[u8; 32], n_r: &[u8; 16], m_r: &Measurement, m_i: Option<&Measurement>) -> Vec<u8> {
    let mut t = b"teeinfer/handshake/v1".to_vec();
    t.extend_from_slice(pk_i);
    t.extend_from_slice(n_i);
    t.extend_from_slice(pk_r);
    t.extend_from_slice(n_r);
    t.extend_from_slice(m_r.as_bytes());
    match m_i {
        Some(m) => {
            t.push(1);
            t.extend_from_slice(m.as_bytes());
        }
        None => t.push(0),
    }
    t
}

fn agree(secret: &StaticSecret, peer: &[u8; 32]) -> Result<[u8; 32], HandshakeError> {
    let shared = secret.diffie_hellman(&PublicKey::from(*peer));
    if !shared.was_contributory() {
        return Err(HandshakeError::KeyAgreement);
    }
    Ok(*shared.as_bytes())
}

/// Initiating side of a handshake (client or runtime enclave).
pub struct Initiator {
    secret: StaticSecret,
    pubkey: [u8; 32],
    nonce: [u8; 16],
    verifier: PlatformVerifier,
    expect: Expectation,
    attester: Option<Attester>,
}

impl Initiator {
    /// Starts a handshake. `attester` is `Some` for mutual attestation.
    pub fn start<R: RngCore + CryptoRng>(
        rng: &mut R,
        verifier: PlatformVerifier,
        expect: Expectation,
        attester: Option<Attester>,
    ) -> (Initiator, HandshakeMessage) {
        let secret = StaticSecret::random_from_rng(&mut *rng);
        let pubkey = PublicKey::from(&secret).to_bytes();
        let mut nonce = [0u8; 16];
        rng.fill_bytes(&mut nonce);
        let hello = HandshakeMessage { pubkey, nonce, report: None };
        (Initiator { secret, pubkey, nonce, verifier, expect, attester }, hello)
    }

    /// Verifies the responder's report and derives the channel. Returns the
    /// finish message that must be delivered to the responder.
    pub fn finish(self, server_hello: &HandshakeMessage) -> Result<(SecureChannel, HandshakeMessage), HandshakeError> {
        let report = server_hello.report.as_ref().ok_or(HandshakeError::ReportMissing)?;
        if !verify_report(&self.verifier, report, &self.expect) {
            return Err(HandshakeError::ReportRejected);
        }
        if report.channel_pubkey != server_hello.pubkey || report.nonce != self.nonce {
            return Err(HandshakeError::BindingMismatch);
        }
        let own_report = self.attester.as_ref().map(|a| a.report(&self.pubkey, server_hello.nonce));
        let shared = agree(&self.secret, &server_hello.pubkey)?;
        let transcript = transcript_bytes(
            &self.pubkey,
            &self.nonce,
            &server_hello.pubkey,
            &server_hello.nonce,
            &report.measurement,
            own_report.as_ref().map(|r| &r.measurement),
        );
        let (i2r, r2i) = derive_session_keys(&shared, &transcript).map_err(|_| HandshakeError::KeyAgreement)?;
        let channel = SecureChannel {
            send_key: i2r,
            recv_key: r2i,
            peer_report: Some(report.clone()),
            session_id: sha256(&transcript),
            send_seq: 0,
            recv_seq: 0,
        };
        let finish = HandshakeMessage { pubkey: self.pubkey, nonce: server_hello.nonce, report: own_report };
        Ok((channel, finish))
    }
}

/// How a responder treats the initiator's attestation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PeerAuth {
    /// One-way: the initiator does not attest.
    None,
    /// The initiator may attest; a presented report must verify.
    Optional(Expectation),
    /// Mutual attestation is mandatory.
    Required(Expectation),
}

/// Responding side of a handshake (always attests).
#[derive(Clone, Debug)]
pub struct Responder {
    attester: Attester,
    verifier: PlatformVerifier,
    peer: PeerAuth,
}

pub struct PendingResponder {
    secret: StaticSecret,
    hello: HandshakeMessage,
    pubkey: [u8; 32],
    nonce: [u8; 16],
    measurement: Measurement,
    verifier: PlatformVerifier,
    peer: PeerAuth,
}

impl Responder {
    pub fn new(attester: Attester, verifier: PlatformVerifier, peer: PeerAuth) -> Self {
        Responder { attester, verifier, peer }
    }

    pub fn measurement(&self) -> Measurement {
        self.attester.measurement()
    }

    pub fn respond<R: RngCore + CryptoRng>(&self, rng: &mut R, hello: &HandshakeMessage) -> Result<(PendingResponder, HandshakeMessage), HandshakeError> {
        if hello.report.is_some() {
            return Err(HandshakeError::Malformed("hello must not carry a report".into()));
        }
        let secret = StaticSecret::random_from_rng(&mut *rng);
        let pubkey = PublicKey::from(&secret).to_bytes();
        let mut nonce = [0u8; 16];
        rng.fill_bytes(&mut nonce);
        let report = self.attester.report(&pubkey, hello.nonce);
        let reply = HandshakeMessage { pubkey, nonce, report: Some(report) };
        Ok((
            PendingResponder {
                secret,
                hello: hello.clone(),
                pubkey,
                nonce,
                measurement: self.attester.measurement(),
                verifier: self.verifier,
                peer: self.peer.clone(),
            },
            reply,
        ))
    }
}

impl PendingResponder {
    pub fn finish(self, finish: &HandshakeMessage) -> Result<SecureChannel, HandshakeError> {
        if finish.pubkey != self.hello.pubkey || finish.nonce != self.nonce {
            return Err(HandshakeError::BindingMismatch);
        }
        let peer_report = match (&self.peer, &finish.report) {
            (PeerAuth::Required(_), None) => return Err(HandshakeError::ReportMissing),
            (PeerAuth::None, Some(_)) => return Err(HandshakeError::Malformed("unexpected initiator report".into())),
            (_, None) => None,
            (PeerAuth::Optional(exp) | PeerAuth::Required(exp), Some(report)) => {
                if !verify_report(&self.verifier, report, exp) {
                    return Err(HandshakeError::ReportRejected);
                }
                if report.channel_pubkey != self.hello.pubkey || report.nonce != self.nonce {
                    return Err(HandshakeError::BindingMismatch);
                }
                Some(report.clone())
            }
        };
        let shared = agree(&self.secret, &self.hello.pubkey)?;
        let transcript = transcript_bytes(
            &self.hello.pubkey,
            &self.hello.nonce,
            &self.pubkey,
            &self.nonce,
            &self.measurement,
            peer_report.as_ref().map(|r| &r.measurement),
        );
        let (i2r, r2i) = derive_session_keys(&shared, &transcript).map_err(|_| HandshakeError::KeyAgreement)?;
        Ok(SecureChannel {
            send_key: r2i,
            recv_key: i2r,
            peer_report,
            session_id: sha256(&transcript),
            send_seq: 0,
            recv_seq: 0,
        })
    }
}

/// Runs a complete in-process handshake and returns `(initiator_end, responder_end)`.
pub fn establish_channel<R: RngCore + CryptoRng>(
    rng: &mut R,
    verifier: PlatformVerifier,
    initiator_expects: Expectation,
    initiator_attester: Option<Attester>,
    responder: &Responder,
) -> Result<(SecureChannel, SecureChannel), HandshakeError> {
    let (init, hello) = Initiator::start(rng, verifier, initiator_expects, initiator_attester);
    let (pending, reply) = responder.respond(rng, &hello)?;
    let (client_end, finish) = init.finish(&reply)?;
    let server_end = pending.finish(&finish)?;
    Ok((client_end, server_end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ident() -> CodeIdentity {
        CodeIdentity::new("rt", "1.0", "linear")
            .with_flag("tcs_count", 1)
            .with_flag("fixed_model", "none")
            .with_flag("key_cache_enabled", true)
    }

    #[test]
    fn measurement_tracks_config() {
        let a = measure_code(&ident());
        assert_eq!(a, measure_code(&ident()));
        assert_ne!(a, measure_code(&ident().with_flag("fixed_model", "m0")));
        assert_ne!(
            measure_code(&ident().with_flag("tcs_count", 1)),
            measure_code(&ident().with_flag("tcs_count", 8))
        );
        // Flag insertion order does not matter.
        let x = CodeIdentity::new("rt", "1.0", "linear").with_flag("b", 1).with_flag("a", 2);
        let y = CodeIdentity::new("rt", "1.0", "linear").with_flag("a", 2).with_flag("b", 1);
        assert_eq!(measure_code(&x), measure_code(&y));
        // Length prefixes keep field boundaries unambiguous.
        let p = CodeIdentity::new("ab", "c", "x");
        let q = CodeIdentity::new("a", "bc", "x");
        assert_ne!(measure_code(&p), measure_code(&q));
    }

    #[test]
    fn report_verification() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let root = PlatformRoot::generate(&mut rng);
        let v = root.verifier();
        let m = measure_code(&ident());
        let r = root.generate_report(m, &[9u8; 32], [3u8; 16]);
        assert!(verify_report(&v, &r, &Expectation::Any));
        assert!(verify_report(&v, &r, &Expectation::Exact(m)));
        assert!(!verify_report(&v, &r, &Expectation::Exact(measure_code(&ident().with_flag("x", 1)))));

        let mut t = r.clone();
        t.measurement.0 .0[0] ^= 1;
        assert!(!verify_report(&v, &t, &Expectation::Any));
        let mut t = r.clone();
        t.platform_sig[5] ^= 1;
        assert!(!verify_report(&v, &t, &Expectation::Any));
        let mut t = r.clone();
        t.nonce[0] ^= 1;
        assert!(!verify_report(&v, &t, &Expectation::Any));

        let other = PlatformRoot::generate(&mut rng);
        assert!(!verify_report(&other.verifier(), &r, &Expectation::Any));
        assert_eq!(AttestationReport::from_bytes(&r.to_bytes()).unwrap(), r);
    }

    fn parties(rng: &mut ChaCha20Rng) -> (PlatformRoot, Attester, Attester) {
        let root = PlatformRoot::generate(rng);
        let ks = Attester::new(root.clone(), measure_code(&CodeIdentity::new("keyservice", "1", "none")));
        let rt = Attester::new(root.clone(), measure_code(&ident()));
        (root, ks, rt)
    }

    #[test]
    fn one_way_channel() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (root, ks, _) = parties(&mut rng);
        let responder = Responder::new(ks.clone(), root.verifier(), PeerAuth::Optional(Expectation::Any));
        let (mut c, mut s) = establish_channel(&mut rng, root.verifier(), Expectation::Exact(ks.measurement()), None, &responder).unwrap();
        assert_eq!(c.peer_measurement(), Some(ks.measurement()));
        assert_eq!(s.peer_measurement(), None);
        assert_eq!(c.session_id(), s.session_id());
        let env = c.seal(b"ping").unwrap();
        assert_eq!(s.open(&env).unwrap(), b"ping");
        let env = s.seal(b"pong").unwrap();
        assert_eq!(c.open(&env).unwrap(), b"pong");
        // Replay of the same record fails.
        assert_eq!(c.open(&env), Err(CryptoError::Integrity));
    }

    #[test]
    fn wrong_keyservice_measurement_aborts() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (root, ks, rt) = parties(&mut rng);
        let responder = Responder::new(ks, root.verifier(), PeerAuth::Optional(Expectation::Any));
        let err = establish_channel(&mut rng, root.verifier(), Expectation::Exact(rt.measurement()), None, &responder).unwrap_err();
        assert_eq!(err, HandshakeError::ReportRejected);
    }

    #[test]
    fn mutual_channel_records_both_peers() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (root, ks, rt) = parties(&mut rng);
        let responder = Responder::new(ks.clone(), root.verifier(), PeerAuth::Required(Expectation::Any));
        let (c, s) = establish_channel(&mut rng, root.verifier(), Expectation::Exact(ks.measurement()), Some(rt.clone()), &responder).unwrap();
        assert_eq!(c.peer_measurement(), Some(ks.measurement()));
        assert_eq!(s.peer_measurement(), Some(rt.measurement()));
    }

    #[test]
    fn runtime_with_wrong_measurement_is_refused() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (root, ks, rt) = parties(&mut rng);
        let expected_rt = measure_code(&ident().with_flag("tcs_count", 8));
        let responder = Responder::new(ks.clone(), root.verifier(), PeerAuth::Required(Expectation::Exact(expected_rt)));
        let err = establish_channel(&mut rng, root.verifier(), Expectation::Exact(ks.measurement()), Some(rt), &responder).unwrap_err();
        assert_eq!(err, HandshakeError::ReportRejected);

        // A runtime whose reports come from a foreign platform is refused too.
        let rogue = Attester::new(PlatformRoot::generate(&mut rng), expected_rt);
        let err = establish_channel(&mut rng, root.verifier(), Expectation::Exact(ks.measurement()), Some(rogue), &responder).unwrap_err();
        assert_eq!(err, HandshakeError::ReportRejected);
    }

    #[test]
    fn required_mutual_without_report_aborts() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (root, ks, _) = parties(&mut rng);
        let responder = Responder::new(ks.clone(), root.verifier(), PeerAuth::Required(Expectation::Any));
        let err = establish_channel(&mut rng, root.verifier(), Expectation::Exact(ks.measurement()), None, &responder).unwrap_err();
        assert_eq!(err, HandshakeError::ReportMissing);
    }

    #[test]
    fn replayed_server_hello_is_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (root, ks, _) = parties(&mut rng);
        let responder = Responder::new(ks.clone(), root.verifier(), PeerAuth::Optional(Expectation::Any));
        let (_i1, hello1) = Initiator::start(&mut rng, root.verifier(), Expectation::Exact(ks.measurement()), None);
        let (_p1, reply1) = responder.respond(&mut rng, &hello1).unwrap();
        let (i2, _hello2) = Initiator::start(&mut rng, root.verifier(), Expectation::Exact(ks.measurement()), None);
        // Reply bound to the first hello's nonce.
        assert_eq!(i2.finish(&reply1).unwrap_err(), HandshakeError::BindingMismatch);
    }

    #[test]
    fn handshake_json_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (root, ks, _) = parties(&mut rng);
        let responder = Responder::new(ks, root.verifier(), PeerAuth::None);
        let (_i, hello) = Initiator::start(&mut rng, root.verifier(), Expectation::Any, None);
        let (_p, reply) = responder.respond(&mut rng, &hello).unwrap();
        let v: serde_json::Value = serde_json::from_str(&reply.to_json()).unwrap();
        assert!(v.get("report").unwrap().is_string());
        assert!(v.get("pubkey").unwrap().is_string());
        assert!(v.get("nonce").unwrap().is_string());
        assert_eq!(HandshakeMessage::from_json(&reply.to_json()).unwrap(), reply);
        assert!(serde_json::from_str::<serde_json::Value>(&hello.to_json()).unwrap().get("report").is_none());
    }

    proptest::proptest! {
        #[test]
        fn prop_report_nonce_bound(seed in 0u64..1000, n1 in proptest::array::uniform16(0u8..), n2 in proptest::array::uniform16(0u8..)) {
            proptest::prop_assume!(n1 != n2);
            let root = PlatformRoot::generate(&mut ChaCha20Rng::seed_from_u64(seed));
            let m = measure_code(&ident());
            let mut r = root.generate_report(m, &[1u8; 32], n1);
            r.nonce = n2;
            proptest::prop_assert!(!verify_report(&root.verifier(), &r, &Expectation::Any));
        }

        #[test]
        fn prop_measure_injective(a in "[a-z]{1,6}", b in "[a-z]{1,6}", t1 in 1u32..9, t2 in 1u32..9) {
            let x = CodeIdentity::new("rt", &a, "linear").with_flag("tcs_count", t1);
            let y = CodeIdentity::new("rt", &b, "linear").with_flag("tcs_count", t2);
            proptest::prop_assert_eq!(x == y, measure_code(&x) == measure_code(&y));
        }
    }
}
