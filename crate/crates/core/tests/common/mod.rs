// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use teeinfer::attestation::{measure_code, Attester, CodeIdentity, Measurement, PlatformRoot};
use teeinfer::clients::{connect_keyservice, owner_setup, OwnerContext, UserContext};
use teeinfer::keyservice::{KeyService, KsClient, KsServer, KsTransport, LocalTransport};
use teeinfer::runtime::storage::MemStore;
use teeinfer::runtime::{FixedResolver, RuntimeConfig};
use teeinfer::wire::Transcript;
use teeinfer::{LinearBackendF64, LinearEnclave, LinearModelF64};

pub const KS_ADDR: &str = "ks://local";

pub struct World {
    pub platform: PlatformRoot,
    pub ks: Arc<KeyService>,
    pub server: Arc<KsServer>,
    pub wire: Transcript,
    pub untrusted: Transcript,
    pub store: Arc<MemStore>,
    pub rng: ChaCha20Rng,
}

impl World {
    pub fn new(seed: u64) -> Self {
        let platform = PlatformRoot::from_seed([seed as u8; 32]);
        let ks_m = measure_code(&CodeIdentity::new("teeinfer-keyservice", "test", "none"));
        let ks = Arc::new(KeyService::new(Attester::new(platform.clone(), ks_m), platform.verifier()));
        let server = Arc::new(KsServer::with_rng(ks.clone(), ChaCha20Rng::seed_from_u64(seed ^ 0x55)));
        World {
            platform,
            ks,
            server,
            wire: Transcript::new(),
            untrusted: Transcript::new(),
            store: Arc::new(MemStore::new()),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn transport(&self) -> Arc<dyn KsTransport> {
        Arc::new(LocalTransport::recorded(self.server.clone(), self.wire.clone()))
    }

    pub fn client(&mut self) -> KsClient {
        connect_keyservice(self.transport(), &mut self.rng, self.platform.verifier(), self.ks.measurement()).unwrap()
    }

    pub fn config(&self) -> RuntimeConfig {
        RuntimeConfig::new(self.ks.measurement())
    }

    pub fn enclave(&self, config: RuntimeConfig) -> LinearEnclave {
        LinearEnclave::new(
            LinearBackendF64::default(),
            config,
            self.platform.clone(),
            self.store.clone(),
            Arc::new(FixedResolver(self.transport())),
        )
        .unwrap()
        .with_untrusted_transcript(self.untrusted.clone())
        .with_rng_seed(7)
    }

    /// One owner publishing `models`, `n_users` users enrolled for every
    /// model on enclave `es`.
    pub fn setup(&mut self, models: &[LinearModelF64], es: Measurement, n_users: usize) -> (OwnerContext, Vec<UserContext>) {
        let mut c = self.client();
        let mut users: Vec<UserContext> = (0..n_users).map(|_| UserContext::register(&mut c, &mut self.rng).unwrap()).collect();
        let grants: Vec<_> = users.iter().map(|u| (es, u.uid())).collect();
        let owner = owner_setup(&mut c, &mut self.rng, self.store.as_ref(), models, &grants).unwrap();
        for u in &mut users {
            for m in models {
                u.enroll(&mut c, &mut self.rng, &m.model_id, es).unwrap();
            }
        }
        (owner, users)
    }
}

pub fn random_model(rng: &mut impl Rng, id: &str, rows: usize, cols: usize) -> LinearModelF64 {
    let w = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
    LinearModelF64::new(id, rows, cols, w, b).unwrap()
}

/// Straightforward `W·x + b`.
pub fn oracle(m: &LinearModelF64, x: &[f64]) -> Vec<f64> {
    (0..m.rows)
        .map(|r| {
            let mut s = m.bias[r];
            for c in 0..m.cols {
                s += m.weights[r * m.cols + c] * x[c];
            }
            s
        })
        .collect()
}
