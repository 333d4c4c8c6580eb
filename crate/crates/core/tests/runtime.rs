// SPDX-License-Identifier: Apache-2.0

mod common;

use std::sync::Arc;

use common::{oracle, random_model, World, KS_ADDR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use teeinfer::attestation::measure_code;
use teeinfer::clients::{ClientError, GatewayError, InferenceGateway, UserContext};
use teeinfer::runtime::backend::{InferenceBackend, LinearBackend};
use teeinfer::runtime::model::{decode_model_file, encode_input, encode_model_file, InferenceOutput};
use teeinfer::runtime::{classify_invocation, InvocationPath, RuntimeError};
use teeinfer::{crypto::SymKey, LinearModelF64};

const N: usize = 3;

fn paths(e: &teeinfer::LinearEnclave, u: &mut UserContext, model: &str, n: usize) -> Vec<InvocationPath> {
    let es = e.measurement();
    (0..n).map(|_| u.user_request(e, model, es, KS_ADDR, &[1.0, 2.0, 3.0]).unwrap().1).collect()
}

#[test]
fn path_accounting_user_and_model_switch() {
    let mut w = World::new(1);
    let e = w.enclave(w.config());
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 4, N), random_model(&mut w.rng, "m1", 4, N)];
    let (_, mut users) = w.setup(&models, es, 2);
    let (u1, rest) = users.split_first_mut().unwrap();
    let u2 = &mut rest[0];

    let p = paths(&e, u1, "m0", 10);
    assert_eq!(p[0], InvocationPath::Cold);
    assert!(p[1..].iter().all(|&x| x == InvocationPath::Hot));
    let s = e.stats();
    assert_eq!((s.provisioning_calls, s.model_loads, s.handshakes), (1, 1, 1));

    // New user: keys replaced, model and runtime reused.
    assert_eq!(paths(&e, u2, "m0", 1), vec![InvocationPath::Warm]);
    let s = e.stats();
    assert_eq!((s.provisioning_calls, s.model_loads, s.runtime_inits, s.handshakes), (2, 1, 1, 1));

    // Back to the first user: the pair was evicted, so it is fetched again.
    assert_eq!(paths(&e, u1, "m0", 2), vec![InvocationPath::Warm, InvocationPath::Hot]);
    assert_eq!(e.stats().provisioning_calls, 3);

    // Model switch reloads once.
    assert_eq!(paths(&e, u1, "m1", 2), vec![InvocationPath::Warm, InvocationPath::Hot]);
    let s = e.stats();
    assert_eq!((s.provisioning_calls, s.model_loads, s.runtime_inits), (4, 2, 2));
    assert_eq!(s.max_resident_models, 1);
    assert_eq!(s.staged_bytes, 0);
}

#[test]
fn classification_matches_work_done() {
    let mut w = World::new(2);
    let mut cfg = w.config();
    cfg.tcs_count = 2;
    let e = w.enclave(cfg);
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "a", 2, N), random_model(&mut w.rng, "b", 2, N)];
    let (_, mut users) = w.setup(&models, es, 2);
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    for i in 0..60 {
        let ui = rng.gen_range(0..2);
        let model = ["a", "b"][rng.gen_range(0..2)];
        let ctx = rng.gen_range(0..2);
        let u = &mut users[ui];
        let req = u.build_request(model, es, KS_ADDR, &[0.5; N]).unwrap();
        let before = e.snapshot(ctx);
        let out = e.ec_model_inf(&req, ctx).unwrap();
        assert_eq!(out.path, classify_invocation(i == 0, &before, model, &u.uid()), "request {i}");
        let env = e.ec_get_output(ctx).unwrap();
        let got = u.open_response(&req, es, &env).unwrap();
        let m = models.iter().find(|m| m.model_id == model).unwrap();
        for (g, o) in got.scores.iter().zip(oracle(m, &[0.5; N])) {
            assert!((g - o).abs() < 1e-12);
        }
    }
}

#[test]
fn sequential_isolation_changes_measurement_and_forces_warm() {
    let mut w = World::new(3);
    let plain = w.config();
    let iso = w.config().sequential_isolation();
    assert_ne!(plain.measurement("linear-f64"), iso.measurement("linear-f64"));
    let e = w.enclave(iso);
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 3, N)];
    let (_, mut users) = w.setup(&models, es, 1);
    let p = paths(&e, &mut users[0], "m0", 5);
    assert_eq!(p[0], InvocationPath::Cold);
    assert!(p[1..].iter().all(|&x| x == InvocationPath::Warm));
    let s = e.stats();
    assert_eq!((s.provisioning_calls, s.model_loads, s.runtime_inits), (5, 1, 5));
    // The enclave returns to a state holding only the model.
    let snap = e.snapshot(0);
    assert_eq!(snap.model_id.as_deref(), Some("m0"));
    assert_eq!(snap.key_pair, None);
    assert_eq!(snap.ctx_runtime, None);
}

#[test]
fn no_model_reuse_reloads_every_request() {
    let mut w = World::new(4);
    let mut cfg = w.config();
    cfg.model_reuse = false;
    let e = w.enclave(cfg);
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 3, N)];
    let (_, mut users) = w.setup(&models, es, 1);
    let p = paths(&e, &mut users[0], "m0", 4);
    assert!(p[1..].iter().all(|&x| x == InvocationPath::Warm));
    let s = e.stats();
    assert_eq!((s.provisioning_calls, s.model_loads, s.runtime_inits), (1, 4, 4));
    assert_eq!(s.resident_models, 0);
}

#[test]
fn output_and_context_lifecycle() {
    let mut w = World::new(5);
    let e = w.enclave(w.config());
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 3, N)];
    let (_, mut users) = w.setup(&models, es, 1);
    assert_eq!(e.ec_get_output(0), Err(RuntimeError::NoOutput));
    assert_eq!(e.ec_get_output(5), Err(RuntimeError::BadContext(5)));
    e.ec_clear_exec_ctx(0).unwrap();

    let u = &mut users[0];
    let req = u.build_request("m0", es, KS_ADDR, &[1.0; N]).unwrap();
    e.ec_model_inf(&req, 0).unwrap();
    e.ec_get_output(0).unwrap();
    assert_eq!(e.ec_get_output(0), Err(RuntimeError::NoOutput));

    e.ec_clear_exec_ctx(0).unwrap();
    let before = e.stats();
    let req = u.build_request("m0", es, KS_ADDR, &[1.0; N]).unwrap();
    let out = e.ec_model_inf(&req, 0).unwrap();
    assert_eq!(out.path, InvocationPath::Warm);
    assert!(out.work.runtime_init && !out.work.provisioned && !out.work.model_loaded);
    assert_eq!(e.stats().runtime_inits, before.runtime_inits + 1);
}

#[test]
fn staging_buffers() {
    let mut w = World::new(6);
    let e = w.enclave(w.config());
    let models = [random_model(&mut w.rng, "m0", 3, N)];
    w.setup(&models, e.measurement(), 1);
    let n = e.oc_load_model("m0").unwrap();
    assert_eq!(e.stats().staged_bytes, n as u64);
    assert!(w.untrusted.contains(&w.store.all_bytes()[0]));
    e.oc_free_loaded("m0");
    assert_eq!(e.stats().staged_bytes, 0);
    assert_eq!(e.oc_load_model("missing"), Err(RuntimeError::NotFound("missing".into())));
}

#[test]
fn denial_and_request_integrity() {
    let mut w = World::new(7);
    let e = w.enclave(w.config());
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 3, N)];
    let (_, mut users) = w.setup(&models, es, 1);

    // Enrolled with a request key but never granted.
    let mut c = w.client();
    let mut stranger = UserContext::register(&mut c, &mut w.rng).unwrap();
    stranger.enroll(&mut c, &mut w.rng, "m0", es).unwrap();
    let err = stranger.user_request(&e, "m0", es, KS_ADDR, &[1.0; N]).unwrap_err();
    assert_eq!(err, ClientError::Gateway(GatewayError::Denied));
    let snap = e.snapshot(0);
    assert_eq!((snap.model_id, snap.key_pair), (None, None));
    assert_eq!(e.stats().model_loads, 0);

    let u = &mut users[0];
    let req = u.build_request("m0", es, KS_ADDR, &[1.0; N]).unwrap();
    e.invoke(&req).unwrap();
    assert_eq!(e.invoke(&req).unwrap_err(), RuntimeError::Replay { seq: 1, last: 1 });

    let mut bad = u.build_request("m0", es, KS_ADDR, &[1.0; N]).unwrap();
    bad.payload.ciphertext[0] ^= 1;
    assert_eq!(e.invoke(&bad).unwrap_err(), RuntimeError::PayloadIntegrity);
    // Sequence numbers are bound into the AAD.
    let mut moved = u.build_request("m0", es, KS_ADDR, &[1.0; N]).unwrap();
    moved.seq += 10;
    assert_eq!(e.invoke(&moved).unwrap_err(), RuntimeError::PayloadIntegrity);

    // Dimension mismatch.
    let err = u.user_request(&e, "m0", es, KS_ADDR, &[1.0; N + 1]).unwrap_err();
    assert!(matches!(err, ClientError::Gateway(GatewayError::Rejected(_))));
}

#[test]
fn tampered_model_file_rejected() {
    let mut w = World::new(8);
    let e = w.enclave(w.config());
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 3, N)];
    let (_, mut users) = w.setup(&models, es, 1);
    let mut file = w.store.all_bytes().pop().unwrap();
    let last = file.len() - 20;
    file[last] ^= 0x80;
    w.store.put("m0", file);
    let err = users[0].user_request(&e, "m0", es, KS_ADDR, &[1.0; N]).unwrap_err();
    assert_eq!(err, ClientError::Gateway(GatewayError::Rejected(RuntimeError::ModelIntegrity("m0".into()).to_string())));
    assert_eq!(e.stats().resident_models, 0);
}

#[test]
fn enclave_refuses_unexpected_keyservice() {
    let mut w = World::new(9);
    let mut cfg = w.config();
    cfg.keyservice_measurement = measure_code(&teeinfer::attestation::CodeIdentity::new("other", "1", "x"));
    let e = w.enclave(cfg);
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 3, N)];
    let (_, mut users) = w.setup(&models, es, 1);
    let err = users[0].user_request(&e, "m0", es, KS_ADDR, &[1.0; N]).unwrap_err();
    assert!(matches!(err, ClientError::Gateway(GatewayError::Rejected(_))));
    assert_eq!(e.stats().provisioning_calls, 0);
}

#[test]
fn fixed_model_enclave() {
    let mut w = World::new(10);
    let mut cfg = w.config();
    cfg.fixed_model = Some("m0".into());
    let e = w.enclave(cfg);
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 3, N), random_model(&mut w.rng, "m1", 3, N)];
    let (_, mut users) = w.setup(&models, es, 1);
    users[0].user_request(&e, "m0", es, KS_ADDR, &[1.0; N]).unwrap();
    let err = users[0].user_request(&e, "m1", es, KS_ADDR, &[1.0; N]).unwrap_err();
    assert_eq!(err, ClientError::Gateway(GatewayError::Rejected(RuntimeError::ModelNotAllowed("m0".into()).to_string())));
}

#[test]
fn memory_gauge_counts_contexts() {
    let mut w = World::new(11);
    let mut cfg = w.config();
    cfg.tcs_count = 4;
    cfg.runtime_buffer_bytes = 1000;
    cfg.fixed_overhead_bytes = 500;
    let e = w.enclave(cfg);
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 3, N)];
    let (_, mut users) = w.setup(&models, es, 1);
    let model_bytes = w.store.all_bytes()[0].len() as u64;
    assert_eq!(e.stats().memory_bytes, 500);
    for ctx in 0..4 {
        let req = users[0].build_request("m0", es, KS_ADDR, &[1.0; N]).unwrap();
        e.ec_model_inf(&req, ctx).unwrap();
        assert_eq!(e.stats().memory_bytes, model_bytes + (ctx as u64 + 1) * 1000 + 500);
    }
    e.ec_clear_exec_ctx(3).unwrap();
    let s = e.stats();
    assert_eq!((s.memory_bytes, s.peak_memory_bytes), (model_bytes + 3000 + 500, model_bytes + 4000 + 500));
}

#[test]
fn concurrent_requests_keep_one_model_resident() {
    let mut w = World::new(12);
    let mut cfg = w.config();
    cfg.tcs_count = 4;
    let e = Arc::new(w.enclave(cfg));
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 5, N), random_model(&mut w.rng, "m1", 5, N)];
    let (_, users) = w.setup(&models, es, 3);
    let models = Arc::new(models);
    let handles: Vec<_> = users
        .into_iter()
        .enumerate()
        .map(|(i, mut u)| {
            let e = e.clone();
            let models = models.clone();
            std::thread::spawn(move || {
                let mut rng = ChaCha20Rng::seed_from_u64(i as u64);
                for _ in 0..25 {
                    let m = &models[rng.gen_range(0..2)];
                    let x: Vec<f64> = (0..N).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let (out, _) = u.user_request(e.as_ref(), &m.model_id, es, KS_ADDR, &x).unwrap();
                    for (g, o) in out.scores.iter().zip(oracle(m, &x)) {
                        assert!((g - o).abs() < 1e-12);
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let s = e.stats();
    assert_eq!(s.invocations, 75);
    assert_eq!(s.max_resident_models, 1);
    assert!(s.resident_models <= 1);
}

#[test]
fn same_pair_runs_concurrently() {
    let mut w = World::new(13);
    let mut cfg = w.config();
    cfg.tcs_count = 8;
    let e = Arc::new(w.enclave(cfg));
    let es = e.measurement();
    let models = [random_model(&mut w.rng, "m0", 2, N)];
    let (_, mut users) = w.setup(&models, es, 1);
    let reqs: Vec<_> = (0..32).map(|_| users[0].build_request("m0", es, KS_ADDR, &[1.0; N]).unwrap()).collect();
    // Warm the enclave with the first request, then run the rest in parallel.
    e.submit(&reqs[0]).unwrap();
    std::thread::scope(|s| {
        for r in &reqs[1..] {
            let e = e.clone();
            s.spawn(move || {
                let _ = e.invoke(r);
            });
        }
    });
    let s = e.stats();
    assert_eq!((s.provisioning_calls, s.model_loads), (1, 1));
}

#[test]
fn backend_matches_oracle_and_checks_dimensions() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let m = random_model(&mut rng, "r", 4, 3);
    let k = SymKey::generate(&mut rng);
    let file = encode_model_file(&m, &k).unwrap();
    let be = LinearBackend::<f64>::default();
    let loaded = be.model_load("r", &file, &k).unwrap();
    assert_eq!(loaded.weights, m.weights);
    assert_eq!(loaded.declared_size_bytes, file.len() as u64);
    let mut rt = be.runtime_init("r", &loaded, 64).unwrap();
    assert_eq!(rt.buffer_len(), 64);
    let x = [0.3, -1.2, 2.5];
    be.model_exec(&encode_input(&x), &loaded, &mut rt).unwrap();
    let out = InferenceOutput::from_bytes(&be.prepare_output(&mut rt).unwrap()).unwrap();
    let want = oracle(&m, &x);
    for (g, o) in out.scores.iter().zip(&want) {
        assert!((g - o).abs() < 1e-12);
    }
    let best = want.iter().enumerate().fold(0, |b, (i, v)| if *v > want[b] { i } else { b });
    assert_eq!(out.argmax as usize, best);
    assert!(matches!(be.model_exec(&encode_input(&[1.0, 2.0]), &loaded, &mut rt), Err(RuntimeError::Exec(_))));
    assert_eq!(be.prepare_output(&mut rt), Err(RuntimeError::NoOutput));

    // Identity model.
    let id = LinearModelF64::new("i", 2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
    let mut rt = be.runtime_init("i", &id, 0).unwrap();
    be.model_exec(&encode_input(&[1.0, 0.0]), &id, &mut rt).unwrap();
    let out = InferenceOutput::from_bytes(&be.prepare_output(&mut rt).unwrap()).unwrap();
    assert_eq!(out, InferenceOutput { argmax: 0, scores: vec![1.0, 0.0] });

    // Wrong key, wrong id, f32 backend.
    assert!(matches!(be.model_load("r", &file, &SymKey::generate(&mut rng)), Err(RuntimeError::ModelIntegrity(_))));
    assert!(matches!(decode_model_file::<f64>("other", &file, &k), Err(RuntimeError::Malformed(_))));
    let m32 = decode_model_file::<f32>("r", &file, &k).unwrap();
    assert_eq!(m32.rows, 4);
}
