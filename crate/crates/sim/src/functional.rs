// SPDX-License-Identifier: Apache-2.0

//! The real system embedded in the simulator: a key service, an owner who
//! publishes one stand-in model per profile, users, and enclaves. Requests
//! are sealed, served and checked for real; only time is simulated.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use teeinfer::attestation::{Measurement, PlatformRoot};
use teeinfer::clients::{connect_keyservice, ClientError, OwnerContext, UserContext};
use teeinfer::crypto::AeadEnvelope;
use teeinfer::keyservice::{KeyService, KsClient, KsServer, KsTransport, LocalTransport};
use teeinfer::runtime::backend::InferenceBackend;
use teeinfer::runtime::storage::MemStore;
use teeinfer::runtime::{FixedResolver, InferenceRequest, RuntimeConfig, RuntimeError};
use teeinfer::{LinearBackendF64, LinearEnclave, LinearModelF64};

use crate::costs::ModelProfile;

pub const SIM_KS_ADDR: &str = "ks://sim";

pub struct Functional {
    platform: PlatformRoot,
    ks: Arc<KeyService>,
    transport: Arc<dyn KsTransport>,
    store: Arc<MemStore>,
    client: KsClient,
    owner: OwnerContext,
    models: BTreeMap<String, LinearModelF64>,
    users: BTreeMap<String, UserContext>,
    enrolled: BTreeSet<(String, String, Measurement)>,
    rng: ChaCha20Rng,
    enclave_seq: u64,
}

impl Functional {
    pub fn new(seed: u64, profiles: &[ModelProfile]) -> Result<Self, ClientError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let platform = PlatformRoot::from_seed(rng.gen());
        let ks = Arc::new(KeyService::on_platform(&platform));
        let server = Arc::new(KsServer::with_rng(ks.clone(), ChaCha20Rng::seed_from_u64(rng.gen())));
        let transport: Arc<dyn KsTransport> = Arc::new(LocalTransport::new(server));
        let mut client = connect_keyservice(transport.clone(), &mut rng, platform.verifier(), ks.measurement())?;
        let mut owner = OwnerContext::register(&mut client, &mut rng)?;
        let store = Arc::new(MemStore::new());
        let mut models = BTreeMap::new();
        for p in profiles {
            let [rows, cols] = p.dims;
            let w = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = LinearModelF64::new(p.id.as_str(), rows, cols, w, b)?;
            owner.publish_model(&mut client, &mut rng, store.as_ref(), &m)?;
            models.insert(p.id.clone(), m);
        }
        Ok(Functional {
            platform,
            ks,
            transport,
            store,
            client,
            owner,
            models,
            users: BTreeMap::new(),
            enrolled: BTreeSet::new(),
            rng,
            enclave_seq: 0,
        })
    }

    pub fn keyservice(&self) -> &Arc<KeyService> {
        &self.ks
    }

    pub fn base_config(&self) -> RuntimeConfig {
        RuntimeConfig::new(self.ks.measurement())
    }

    pub fn measurement(&self, config: &RuntimeConfig) -> Measurement {
        config.measurement(LinearBackendF64::default().name())
    }

    /// Registers `user` if needed and makes sure it may use `model` on
    /// enclaves measuring `es`.
    pub fn ensure_access(&mut self, user: &str, model: &str, es: Measurement) -> Result<(), ClientError> {
        let key = (user.to_owned(), model.to_owned(), es);
        if self.enrolled.contains(&key) {
            return Ok(());
        }
        if !self.users.contains_key(user) {
            let u = UserContext::register(&mut self.client, &mut self.rng)?;
            self.users.insert(user.to_owned(), u);
        }
        let u = self.users.get_mut(user).expect("registered");
        self.owner.grant(&mut self.client, model, &es, &u.uid())?;
        u.enroll(&mut self.client, &mut self.rng, model, es)?;
        self.enrolled.insert(key);
        Ok(())
    }

    pub fn new_enclave(&mut self, config: RuntimeConfig) -> Result<LinearEnclave, RuntimeError> {
        self.enclave_seq += 1;
        Ok(LinearEnclave::new(
            LinearBackendF64::default(),
            config,
            self.platform.clone(),
            self.store.clone(),
            Arc::new(FixedResolver(self.transport.clone())),
        )?
        .with_rng_seed(self.enclave_seq))
    }

    /// Seals a random input for `model` from `user`.
    pub fn build_request(&mut self, user: &str, model: &str, es: Measurement) -> Result<(InferenceRequest, Vec<f64>), ClientError> {
        let cols = self.models.get(model).map_or(0, |m| m.cols);
        let x: Vec<f64> = (0..cols).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        let u = self.users.get_mut(user).ok_or_else(|| ClientError::NotEnrolled(model.to_owned()))?;
        Ok((u.build_request(model, es, SIM_KS_ADDR, &x)?, x))
    }

    /// Opens a result and compares it with a direct evaluation.
    pub fn check_result(&self, user: &str, req: &InferenceRequest, es: Measurement, env: &AeadEnvelope, x: &[f64]) -> bool {
        let (Some(u), Some(m)) = (self.users.get(user), self.models.get(&req.model_id)) else {
            return false;
        };
        let Ok(out) = u.open_response(req, es, env) else {
            return false;
        };
        let expect: Vec<f64> = (0..m.rows).map(|r| m.bias[r] + (0..m.cols).map(|c| m.weights[r * m.cols + c] * x[c]).sum::<f64>()).collect();
        out.scores.len() == expect.len() && out.scores.iter().zip(&expect).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()))
    }

    pub fn provision_calls(&self) -> u64 {
        self.ks.provision_calls()
    }
}
