// SPDX-License-Identifier: Apache-2.0

//! `owner` and `user` commands. Each keeps its identity in a local wallet
//! file between invocations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use teeinfer::attestation::Measurement;
use teeinfer::clients::{connect_keyservice, OwnerContext, UserContext};
use teeinfer::crypto::Digest;
use teeinfer::keyservice::KsClient;
use teeinfer::runtime::model::InferenceOutput;
use teeinfer::runtime::storage::DirStore;
use teeinfer::runtime::{InvocationPath, RunRequest, RunResponse};
use teeinfer::LinearModelF64;

use super::http::{post_json, HttpTransport};
use super::LiveConfig;

/// Plaintext model as the owner keeps it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub model_id: String,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<LinearModelF64> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: ModelFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(LinearModelF64::new(m.model_id, m.rows, m.cols, m.weights, m.bias)?)
    }
}

/// Attests the configured key service and opens a session.
pub fn connect(cfg: &LiveConfig) -> Result<KsClient> {
    let t = HttpTransport::new(&cfg.keyservice_url)?;
    Ok(connect_keyservice(Arc::new(t), &mut OsRng, cfg.verifier(), cfg.expected_keyservice()?)?)
}

fn write_wallet(path: &Path, json: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&tmp, fs::Permissions::from_mode(0o600))?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn read_wallet(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading wallet {}", path.display()))
}

fn refuse_overwrite(path: &Path) -> Result<()> {
    if path.exists() {
        bail!("{} already exists; refusing to replace an identity", path.display());
    }
    Ok(())
}

pub fn parse_digest(s: &str) -> Result<Digest> {
    Digest::from_hex(s.trim()).map_err(|e| anyhow!("bad id {s:?}: {e}"))
}

pub fn parse_measurement(s: &str) -> Result<Measurement> {
    Measurement::from_hex(s.trim()).map_err(|e| anyhow!("bad measurement {s:?}: {e}"))
}

pub fn owner_register(cfg: &LiveConfig, wallet: &Path) -> Result<Digest> {
    refuse_overwrite(wallet)?;
    let mut ks = connect(cfg)?;
    let owner = OwnerContext::register(&mut ks, &mut OsRng)?;
    write_wallet(wallet, &owner.to_wallet())?;
    Ok(owner.oid())
}

/// Encrypts the model into the model directory and deposits its key.
pub fn owner_encrypt_model(cfg: &LiveConfig, wallet: &Path, model: &Path) -> Result<(String, PathBuf)> {
    let mut owner = OwnerContext::from_wallet(&read_wallet(wallet)?)?;
    let model = ModelFile::load(model)?;
    let store = DirStore::new(&cfg.model_dir);
    let mut ks = connect(cfg)?;
    owner.publish_model(&mut ks, &mut OsRng, &store, &model)?;
    write_wallet(wallet, &owner.to_wallet())?;
    Ok((model.model_id.clone(), store.path_for(&model.model_id)?))
}

pub fn owner_grant(cfg: &LiveConfig, wallet: &Path, model_id: &str, enclave: &str, user: &str) -> Result<()> {
    let owner = OwnerContext::from_wallet(&read_wallet(wallet)?)?;
    let mut ks = connect(cfg)?;
    owner.grant(&mut ks, model_id, &parse_measurement(enclave)?, &parse_digest(user)?)?;
    Ok(())
}

pub fn user_register(cfg: &LiveConfig, wallet: &Path) -> Result<Digest> {
    refuse_overwrite(wallet)?;
    let mut ks = connect(cfg)?;
    let user = UserContext::register(&mut ks, &mut OsRng)?;
    write_wallet(wallet, &user.to_wallet())?;
    Ok(user.uid())
}

pub fn user_enroll(cfg: &LiveConfig, wallet: &Path, model_id: &str, enclave: &str) -> Result<()> {
    let mut user = UserContext::from_wallet(&read_wallet(wallet)?)?;
    let mut ks = connect(cfg)?;
    user.enroll(&mut ks, &mut OsRng, model_id, parse_measurement(enclave)?)?;
    write_wallet(wallet, &user.to_wallet())
}

/// Seals `input`, sends it to `gateway` (the router or a worker) and opens
/// the result.
pub fn user_infer(cfg: &LiveConfig, wallet: &Path, gateway: &str, model_id: &str, enclave: &str, input: &[f64]) -> Result<(InferenceOutput, InvocationPath)> {
    let mut user = UserContext::from_wallet(&read_wallet(wallet)?)?;
    let es = parse_measurement(enclave)?;
    let req = user.build_request(model_id, es, &cfg.keyservice_url, input)?;
    // The sequence number is spent even if the call fails.
    write_wallet(wallet, &user.to_wallet())?;
    let resp: RunResponse =
        post_json(&format!("{}/run", gateway.trim_end_matches('/')), &RunRequest::from(&req)).map_err(|e| anyhow!("request failed: {e}"))?;
    let env = teeinfer::crypto::AeadEnvelope::from_bytes(&resp.result_b64.0)?;
    Ok((user.open_response(&req, es, &env)?, resp.path))
}

pub fn parse_input(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("bad input value {v:?}: {e}"))).collect()
}
