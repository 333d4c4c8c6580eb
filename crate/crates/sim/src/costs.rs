// SPDX-License-Identifier: Apache-2.0

//! Stage cost model. All figures are milliseconds of virtual time.

use serde::{Deserialize, Serialize};

/// Where encrypted models are fetched from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    #[default]
    Local,
    Remote,
}

/// Per-model cost and size parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub id: String,
    pub model_mb: f64,
    pub runtime_buffer_mb: f64,
    /// Enclave size used for initialization cost; defaults to model plus
    /// one buffer per TCS.
    #[serde(default)]
    pub enclave_mb: Option<f64>,
    pub hot_exec_ms: f64,
    /// Runtime initialization as a percentage of `hot_exec_ms`.
    #[serde(default = "default_runtime_init_pct")]
    pub runtime_init_pct: f64,
    /// Measured remote fetch time; overrides the per-MB remote rate.
    #[serde(default)]
    pub remote_fetch_ms: Option<f64>,
    /// Shape of the functional stand-in model.
    #[serde(default = "default_dims")]
    pub dims: [usize; 2],
}

fn default_runtime_init_pct() -> f64 {
    20.0
}

fn default_dims() -> [usize; 2] {
    [4, 8]
}

impl ModelProfile {
    pub fn new(id: &str, model_mb: f64, runtime_buffer_mb: f64, hot_exec_ms: f64, runtime_init_pct: f64) -> Self {
        ModelProfile {
            id: id.to_owned(),
            model_mb,
            runtime_buffer_mb,
            enclave_mb: None,
            hot_exec_ms,
            runtime_init_pct,
            remote_fetch_ms: None,
            dims: default_dims(),
        }
    }

    pub fn runtime_init_ms(&self) -> f64 {
        self.hot_exec_ms * self.runtime_init_pct / 100.0
    }

    pub fn enclave_mb(&self, tcs: usize) -> f64 {
        self.enclave_mb.unwrap_or(self.model_mb + tcs as f64 * self.runtime_buffer_mb)
    }

    /// Reference profiles for the three benchmark networks.
    pub fn mbnet() -> Self {
        ModelProfile { enclave_mb: Some(64.0), remote_fetch_ms: Some(180.0), ..Self::new("mbnet", 17.0, 30.0, 65.79, 39.6) }
    }

    pub fn rsnet() -> Self {
        ModelProfile { enclave_mb: Some(560.0), remote_fetch_ms: Some(2100.0), ..Self::new("rsnet", 170.0, 205.0, 982.96, 21.3) }
    }

    pub fn dsnet() -> Self {
        ModelProfile { enclave_mb: Some(128.0), remote_fetch_ms: Some(360.0), ..Self::new("dsnet", 44.0, 55.0, 388.81, 15.0) }
    }
}

/// Platform-wide stage costs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageCosts {
    pub sandbox_init_ms: f64,
    pub enclave_init_base_ms: f64,
    pub enclave_init_ms_per_mb: f64,
    /// Relative slowdown per additional concurrent enclave launch on a node.
    pub enclave_init_contention: f64,
    /// Remote attestation with one enclave attesting.
    pub attestation_ms: f64,
    pub attestation_contention: f64,
    /// Channel setup and first key retrieval on top of attestation.
    pub handshake_ms: f64,
    /// Key retrieval over an already established channel.
    pub key_fetch_ms: f64,
    pub local_fetch_base_ms: f64,
    pub local_fetch_ms_per_mb: f64,
    pub remote_fetch_ms_per_mb: f64,
    pub decrypt_ms_per_mb: f64,
    pub req_decrypt_ms: f64,
    pub result_encrypt_ms: f64,
}

impl Default for StageCosts {
    fn default() -> Self {
        StageCosts {
            sandbox_init_ms: 200.0,
            enclave_init_base_ms: 350.0,
            enclave_init_ms_per_mb: 4.5,
            enclave_init_contention: 0.1135,
            attestation_ms: 60.0,
            attestation_contention: 1.04,
            handshake_ms: 150.0,
            key_fetch_ms: 15.0,
            local_fetch_base_ms: 20.0,
            local_fetch_ms_per_mb: 2.0,
            remote_fetch_ms_per_mb: 10.6,
            decrypt_ms_per_mb: 1.0,
            req_decrypt_ms: 0.2,
            result_encrypt_ms: 0.2,
        }
    }
}

impl StageCosts {
    pub fn enclave_init_ms(&self, enclave_mb: f64, concurrent: usize) -> f64 {
        let c = concurrent.max(1) as f64;
        (self.enclave_init_base_ms + self.enclave_init_ms_per_mb * enclave_mb) * (1.0 + self.enclave_init_contention * (c - 1.0))
    }

    /// Attestation plus channel establishment and the first key retrieval.
    pub fn attestation_ms(&self, concurrent: usize) -> f64 {
        let c = concurrent.max(1) as f64;
        self.attestation_ms * (1.0 + self.attestation_contention * (c - 1.0)) + self.handshake_ms
    }

    pub fn fetch_ms(&self, profile: &ModelProfile, storage: Storage) -> f64 {
        match storage {
            Storage::Local => self.local_fetch_base_ms + self.local_fetch_ms_per_mb * profile.model_mb,
            Storage::Remote => profile.remote_fetch_ms.unwrap_or(self.remote_fetch_ms_per_mb * profile.model_mb),
        }
    }

    pub fn decrypt_ms(&self, profile: &ModelProfile) -> f64 {
        self.decrypt_ms_per_mb * profile.model_mb
    }

    /// Execution time with `in_service` requests sharing `cores` cores and
    /// an extra multiplier for EPC pressure.
    pub fn exec_ms(&self, profile: &ModelProfile, in_service: usize, cores: usize, epc_multiplier: f64) -> f64 {
        let load = in_service as f64 / cores.max(1) as f64;
        profile.hot_exec_ms * load.max(1.0) * epc_multiplier.max(1.0)
    }
}

/// Virtual time spent in each stage of one request, in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub queue: u64,
    pub join_wait: u64,
    pub sandbox_init: u64,
    pub enclave_init: u64,
    pub attestation: u64,
    pub key_fetch: u64,
    pub model_fetch: u64,
    pub model_decrypt: u64,
    pub runtime_init: u64,
    pub req_decrypt: u64,
    pub exec: u64,
    pub result_encrypt: u64,
}

impl StageBreakdown {
    pub fn total(&self) -> u64 {
        self.queue + self.service_total()
    }

    /// Everything after admission.
    pub fn service_total(&self) -> u64 {
        self.join_wait
            + self.sandbox_init
            + self.enclave_init
            + self.attestation
            + self.key_fetch
            + self.model_fetch
            + self.model_decrypt
            + self.runtime_init
            + self.req_decrypt
            + self.exec
            + self.result_encrypt
    }

    /// Stages a later request on the same instance can share: everything
    /// up to a decrypted model.
    pub fn setup_total(&self) -> u64 {
        self.sandbox_init + self.enclave_init + self.attestation + self.key_fetch + self.model_fetch + self.model_decrypt
    }
}
