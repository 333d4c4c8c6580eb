// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::payload::{seal_grant, seal_model_key, seal_req_key};
use super::*;
use crate::attestation::{establish_channel, measure_code, CodeIdentity, PlatformRoot};
use crate::crypto::sha256;
use crate::wire::{Transcript, B64};

struct Fixture {
    platform: PlatformRoot,
    ks: Arc<KeyService>,
    rng: ChaCha20Rng,
}

fn meas(tag: &str) -> Measurement {
    measure_code(&CodeIdentity::new(tag, "1", "linear"))
}

impl Fixture {
    fn new() -> Self {
        let platform = PlatformRoot::from_seed([7; 32]);
        let ks = KeyService::new(Attester::new(platform.clone(), meas("keyservice")), platform.verifier());
        Fixture { platform, ks: Arc::new(ks), rng: ChaCha20Rng::seed_from_u64(11) }
    }

    fn key(&mut self) -> SymKey {
        SymKey::generate(&mut self.rng)
    }

    /// Server end of a channel whose peer attested as `m`, or an
    /// unattested peer for `None`.
    fn channel(&mut self, m: Option<Measurement>) -> SecureChannel {
        let attester = m.map(|m| Attester::new(self.platform.clone(), m));
        let (_, server) = establish_channel(
            &mut self.rng,
            self.platform.verifier(),
            Expectation::Exact(self.ks.measurement()),
            attester,
            &self.ks.responder(),
        )
        .unwrap();
        server
    }
}

struct World {
    fx: Fixture,
    k_oid: SymKey,
    oid: Digest,
    k_uid: SymKey,
    uid: Digest,
    k_m: SymKey,
    k_r: SymKey,
    es: Measurement,
}

fn world() -> World {
    let mut fx = Fixture::new();
    let (k_oid, k_uid, k_m, k_r) = (fx.key(), fx.key(), fx.key(), fx.key());
    let oid = fx.ks.user_registration(&k_oid).unwrap();
    let uid = fx.ks.user_registration(&k_uid).unwrap();
    World { fx, k_oid, oid, k_uid, uid, k_m, k_r, es: meas("runtime-a") }
}

impl World {
    fn deposit_all(&self, model: &str) {
        let ks = &self.fx.ks;
        ks.add_model_key(&self.oid, &seal_model_key(&self.k_oid, &self.oid, model, &self.k_m).unwrap()).unwrap();
        ks.grant_access(&self.oid, &seal_grant(&self.k_oid, &self.oid, model, &self.es, &self.uid).unwrap()).unwrap();
        ks.add_req_key(&self.uid, &seal_req_key(&self.k_uid, &self.uid, model, &self.es, &self.k_r).unwrap()).unwrap();
    }
}

#[test]
fn registration_is_hash_of_key_and_idempotent() {
    let mut fx = Fixture::new();
    let k = fx.key();
    let a = fx.ks.user_registration(&k).unwrap();
    assert_eq!(a, sha256(k.expose()));
    let d = fx.ks.state_digest();
    assert_eq!(fx.ks.user_registration(&k).unwrap(), a);
    assert_eq!(fx.ks.state_digest(), d);
    assert_eq!(fx.ks.snapshot().identity_count(), 1);
}

#[test]
fn full_flow_releases_keys_to_granted_enclave() {
    let mut w = world();
    w.deposit_all("m1");
    let ch = w.fx.channel(Some(w.es));
    let keys = w.fx.ks.key_provisioning(&ProvisionRequest { user_id: w.uid, model_id: "m1".into() }, &ch).unwrap();
    assert_eq!(keys.model_key, w.k_m);
    assert_eq!(keys.request_key, w.k_r);
}

#[test]
fn unregistered_depositor_rejected() {
    let mut fx = Fixture::new();
    let k = fx.key();
    let km = fx.key();
    let oid = sha256(k.expose());
    let err = fx.ks.add_model_key(&oid, &seal_model_key(&k, &oid, "m", &km).unwrap()).unwrap_err();
    assert_eq!(err, KsError::NotRegistered);
}

#[test]
fn forged_payload_rejected_without_state_change() {
    let mut w = world();
    let forger = w.fx.key();
    let d = w.fx.ks.state_digest();
    // Claiming the owner's id with a payload sealed under another key.
    let forged = seal_model_key(&forger, &w.oid, "m1", &w.k_m).unwrap();
    assert_eq!(w.fx.ks.add_model_key(&w.oid, &forged), Err(KsError::Unauthorized));
    // Owner's key, but sealed for a different purpose.
    let grant = seal_grant(&w.k_oid, &w.oid, "m1", &w.es, &w.uid).unwrap();
    assert_eq!(w.fx.ks.add_model_key(&w.oid, &grant), Err(KsError::Unauthorized));
    // Tampered ciphertext.
    let mut t = seal_model_key(&w.k_oid, &w.oid, "m1", &w.k_m).unwrap();
    t.ciphertext[0] ^= 1;
    assert_eq!(w.fx.ks.add_model_key(&w.oid, &t), Err(KsError::Unauthorized));
    assert_eq!(w.fx.ks.state_digest(), d);
}

#[test]
fn second_owner_cannot_overwrite_model_key() {
    let mut w = world();
    w.deposit_all("m1");
    let k2 = w.fx.key();
    let o2 = w.fx.ks.user_registration(&k2).unwrap();
    let km2 = w.fx.key();
    let err = w.fx.ks.add_model_key(&o2, &seal_model_key(&k2, &o2, "m1", &km2).unwrap()).unwrap_err();
    assert_eq!(err, KsError::NotOwner("m1".into()));
    let err = w.fx.ks.grant_access(&o2, &seal_grant(&k2, &o2, "m1", &w.es, &o2).unwrap()).unwrap_err();
    assert_eq!(err, KsError::NotOwner("m1".into()));
    // The original owner may rotate.
    let km3 = w.fx.key();
    w.fx.ks.add_model_key(&w.oid, &seal_model_key(&w.k_oid, &w.oid, "m1", &km3).unwrap()).unwrap();
}

#[test]
fn grant_requires_deposited_model() {
    let w = world();
    let g = seal_grant(&w.k_oid, &w.oid, "nope", &w.es, &w.uid).unwrap();
    assert_eq!(w.fx.ks.grant_access(&w.oid, &g), Err(KsError::NotOwner("nope".into())));
}

#[test]
fn request_key_last_write_wins() {
    let mut w = world();
    w.deposit_all("m1");
    let k2 = w.fx.key();
    w.fx.ks.add_req_key(&w.uid, &seal_req_key(&w.k_uid, &w.uid, "m1", &w.es, &k2).unwrap()).unwrap();
    let ch = w.fx.channel(Some(w.es));
    let keys = w.fx.ks.key_provisioning(&ProvisionRequest { user_id: w.uid, model_id: "m1".into() }, &ch).unwrap();
    assert_eq!(keys.request_key, k2);
}

#[test]
fn provisioning_truth_table() {
    // Every combination of (grant, request key, model key, peer matches,
    // peer attested); keys are released only when all five hold. The store
    // is built directly so combinations the API forbids (a grant without a
    // model key) are covered too.
    let mut fx = Fixture::new();
    let (k_m, k_r) = (fx.key(), fx.key());
    let (uid, es) = (sha256(b"user"), meas("runtime-a"));
    let triple = AccessTriple::new("m", es, uid);
    for bits in 0u8..32 {
        let (grant, rk, mk, right_peer, attested) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, bits & 8 != 0, bits & 16 != 0);
        let mut st = KeyStoreState::default();
        if grant {
            st.apply(&Mutation::Grant { triple: triple.clone() }).unwrap();
        }
        if rk {
            st.apply(&Mutation::ReqKey { triple: triple.clone(), key: B64(k_r.expose().to_vec()) }).unwrap();
        }
        if mk {
            st.apply(&Mutation::ModelKey { owner: sha256(b"owner"), model_id: "m".into(), key: B64(k_m.expose().to_vec()) }).unwrap();
        }
        *fx.ks.lock() = st;
        let peer = if right_peer { es } else { meas("runtime-b") };
        let ch = fx.channel(attested.then_some(peer));
        let d = fx.ks.state_digest();
        let r = fx.ks.key_provisioning(&ProvisionRequest { user_id: uid, model_id: "m".into() }, &ch);
        assert_eq!(fx.ks.state_digest(), d);
        let expected = grant && rk && mk && right_peer && attested;
        match r {
            Ok(keys) => {
                assert!(expected, "bits {bits:05b}");
                assert_eq!((keys.model_key, keys.request_key), (k_m.clone(), k_r.clone()));
            }
            Err(e) => {
                assert!(!expected, "bits {bits:05b}");
                assert_eq!(e, KsError::Denied);
            }
        }
    }
}

#[test]
fn wrong_user_or_model_denied() {
    let mut w = world();
    w.deposit_all("m1");
    let ch = w.fx.channel(Some(w.es));
    let other = w.fx.key();
    let other_id = w.fx.ks.user_registration(&other).unwrap();
    let ks = &w.fx.ks;
    assert_eq!(ks.key_provisioning(&ProvisionRequest { user_id: other_id, model_id: "m1".into() }, &ch), Err(KsError::Denied));
    assert_eq!(ks.key_provisioning(&ProvisionRequest { user_id: w.uid, model_id: "m2".into() }, &ch), Err(KsError::Denied));
    assert_eq!(ks.provision_calls(), 2);
}

#[test]
fn journal_replays_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ks.journal");
    let platform = PlatformRoot::from_seed([3; 32]);
    let attester = Attester::new(platform.clone(), meas("keyservice"));
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (k_oid, k_m) = (SymKey::generate(&mut rng), SymKey::generate(&mut rng));
    let digest = {
        let ks = KeyService::with_journal(attester.clone(), platform.verifier(), &path).unwrap();
        let oid = ks.user_registration(&k_oid).unwrap();
        ks.add_model_key(&oid, &seal_model_key(&k_oid, &oid, "m", &k_m).unwrap()).unwrap();
        ks.flush().unwrap();
        ks.state_digest()
    };
    let raw = std::fs::read(&path).unwrap();
    assert!(!crate::wire::contains_subslice(&raw, k_m.expose()));
    let ks = KeyService::with_journal(attester, platform.verifier(), &path).unwrap();
    assert_eq!(ks.state_digest(), digest);

    // A different enclave identity cannot read the journal.
    let other = Attester::new(platform.clone(), meas("impostor"));
    assert!(matches!(KeyService::with_journal(other, platform.verifier(), &path), Err(KsError::Journal(_))));

    // Nor can a tampered journal be loaded.
    let mut bad = raw.clone();
    let n = bad.len();
    bad[n - 1] ^= 1;
    std::fs::write(&path, &bad).unwrap();
    let attester = Attester::new(platform.clone(), meas("keyservice"));
    assert!(KeyService::with_journal(attester, platform.verifier(), &path).is_err());
}

// Session protocol.

fn client(fx: &mut Fixture, wire: &Transcript, server: &Arc<KsServer>, attester: Option<Attester>) -> KsClient {
    let t: Arc<dyn KsTransport> = Arc::new(LocalTransport::recorded(server.clone(), wire.clone()));
    KsClient::connect(t, &mut fx.rng, fx.platform.verifier(), fx.ks.measurement(), attester).unwrap()
}

#[test]
fn protocol_end_to_end_and_no_plaintext_on_wire() {
    let mut fx = Fixture::new();
    let server = Arc::new(KsServer::with_rng(fx.ks.clone(), ChaCha20Rng::seed_from_u64(1)));
    let wire = Transcript::new();
    let (k_oid, k_uid, k_m, k_r) = (fx.key(), fx.key(), fx.key(), fx.key());
    let es = meas("runtime-a");

    let mut owner = client(&mut fx, &wire, &server, None);
    let oid = owner.register(&k_oid).unwrap();
    owner.add_model_key(oid, &seal_model_key(&k_oid, &oid, "m1", &k_m).unwrap()).unwrap();
    let mut user = client(&mut fx, &wire, &server, None);
    let uid = user.register(&k_uid).unwrap();
    owner.grant_access(oid, &seal_grant(&k_oid, &oid, "m1", &es, &uid).unwrap()).unwrap();
    user.add_req_key(uid, &seal_req_key(&k_uid, &uid, "m1", &es, &k_r).unwrap()).unwrap();

    // An unattested client is refused keys.
    assert!(user.provision(uid, "m1").unwrap_err().is_denied());

    let ea = Attester::new(fx.platform.clone(), es);
    let mut enclave = client(&mut fx, &wire, &server, Some(ea));
    let keys = enclave.provision(uid, "m1").unwrap();
    assert_eq!((keys.model_key, keys.request_key), (k_m.clone(), k_r.clone()));

    for secret in [&k_oid, &k_uid, &k_m, &k_r] {
        assert!(!wire.contains(secret.expose()));
    }
    assert_eq!(server.session_count(), 3);
}

#[test]
fn client_refuses_wrong_keyservice() {
    let mut fx = Fixture::new();
    let server = Arc::new(KsServer::new(fx.ks.clone()));
    let t: Arc<dyn KsTransport> = Arc::new(LocalTransport::new(server));
    let err = KsClient::connect(t, &mut fx.rng, fx.platform.verifier(), meas("something else"), None).unwrap_err();
    assert_eq!(err, KsClientError::Handshake(crate::attestation::HandshakeError::ReportRejected));
}

#[test]
fn server_rejects_misrouted_and_replayed_records() {
    let mut fx = Fixture::new();
    let server = Arc::new(KsServer::new(fx.ks.clone()));
    let t = LocalTransport::new(server.clone());
    let (init, hello) = crate::attestation::Initiator::start(&mut fx.rng, fx.platform.verifier(), Expectation::Exact(fx.ks.measurement()), None);
    let (sid, reply) = t.hello(&hello).unwrap();
    let (mut ch, fin) = init.finish(&reply).unwrap();

    // Calls before the handshake completes are refused.
    assert!(matches!(t.call(&sid, Route::Register, b"x"), Err(TransportError::Rejected(_))));
    t.finish(&sid, &fin).unwrap();

    let k = fx.key();
    let body = serde_json::to_vec(&protocol::KsRequest::Register { identity_key: crate::wire::B64(k.expose().to_vec()) }).unwrap();
    let sealed = ch.seal(&body).unwrap().to_bytes();
    let reply = t.call(&sid, Route::Provision, &sealed).unwrap();
    let resp: protocol::KsResponse = serde_json::from_slice(&ch.open(&AeadEnvelope::from_bytes(&reply).unwrap()).unwrap()).unwrap();
    assert!(matches!(resp, protocol::KsResponse::Error { error: KsError::WrongRoute }));
    assert_eq!(fx.ks.snapshot().identity_count(), 0);

    // Replaying the same record kills the session.
    assert!(matches!(t.call(&sid, Route::Provision, &sealed), Err(TransportError::Rejected(_))));
    assert_eq!(t.call(&sid, Route::Register, &sealed), Err(TransportError::UnknownSession));
    assert_eq!(t.call("ffff", Route::Register, &sealed), Err(TransportError::UnknownSession));
}

#[test]
fn routes_round_trip_paths() {
    for r in [Route::Register, Route::ModelKey, Route::Grant, Route::ReqKey, Route::Provision] {
        assert_eq!(Route::from_path(r.path()), Some(r));
    }
    assert_eq!(Route::from_path("/nope"), None);
}
