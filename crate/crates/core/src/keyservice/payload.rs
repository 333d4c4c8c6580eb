// SPDX-License-Identifier: Apache-2.0

//! Sealed deposit payloads, built by owners and users and opened by the
//! key service.
//!
//! | deposit     | plaintext                                   | sealed under |
//! |-------------|---------------------------------------------|--------------|
//! | model key   | `str16 model_id ‖ K_M`                      | `K_oid`      |
//! | grant       | `str16 model_id ‖ E_S ‖ uid`                | `K_oid`      |
//! | request key | `str16 model_id ‖ E_S ‖ K_R`                | `K_uid`      |
//!
//! `str16` is a u16 big-endian length followed by UTF-8 bytes. The AAD is
//! `"<purpose>|-|<depositor id hex>"`.

use super::{AccessTriple, KsError};
use crate::attestation::Measurement;
use crate::crypto::{aead_encrypt, context_aad, AeadEnvelope, CryptoError, Digest, Purpose, SymKey};
use crate::wire::{put_str16, Reader};

fn seal(key: &SymKey, purpose: Purpose, depositor: &Digest, body: &[u8]) -> Result<AeadEnvelope, CryptoError> {
    aead_encrypt(key, body, &context_aad(purpose, "", &depositor.to_hex()))
}

pub fn seal_model_key(k_oid: &SymKey, oid: &Digest, model_id: &str, k_m: &SymKey) -> Result<AeadEnvelope, CryptoError> {
    let mut body = Vec::new();
    put_str16(&mut body, model_id);
    body.extend_from_slice(k_m.expose());
    seal(k_oid, Purpose::ModelKey, oid, &body)
}

pub fn seal_grant(k_oid: &SymKey, oid: &Digest, model_id: &str, enclave: &Measurement, uid: &Digest) -> Result<AeadEnvelope, CryptoError> {
    let mut body = Vec::new();
    put_str16(&mut body, model_id);
    body.extend_from_slice(enclave.as_bytes());
    body.extend_from_slice(uid.as_bytes());
    seal(k_oid, Purpose::Grant, oid, &body)
}

pub fn seal_req_key(k_uid: &SymKey, uid: &Digest, model_id: &str, enclave: &Measurement, k_r: &SymKey) -> Result<AeadEnvelope, CryptoError> {
    let mut body = Vec::new();
    put_str16(&mut body, model_id);
    body.extend_from_slice(enclave.as_bytes());
    body.extend_from_slice(k_r.expose());
    seal(k_uid, Purpose::ReqKey, uid, &body)
}

fn malformed(what: &str) -> KsError {
    KsError::Malformed(format!("truncated {what} payload"))
}

fn finish(r: &Reader<'_>, what: &str) -> Result<(), KsError> {
    if r.is_done() {
        Ok(())
    } else {
        Err(KsError::Malformed(format!("trailing bytes in {what} payload")))
    }
}

pub(crate) fn parse_model_key(body: &[u8]) -> Result<(String, SymKey), KsError> {
    let mut r = Reader::new(body);
    let model_id = r.str16().ok_or_else(|| malformed("model key"))?.to_owned();
    let key = SymKey::from_bytes(r.array::<32>().ok_or_else(|| malformed("model key"))?);
    finish(&r, "model key")?;
    Ok((model_id, key))
}

pub(crate) fn parse_grant(body: &[u8]) -> Result<AccessTriple, KsError> {
    let mut r = Reader::new(body);
    let model_id = r.str16().ok_or_else(|| malformed("grant"))?.to_owned();
    let enclave = Measurement(Digest(r.array::<32>().ok_or_else(|| malformed("grant"))?));
    let user_id = Digest(r.array::<32>().ok_or_else(|| malformed("grant"))?);
    finish(&r, "grant")?;
    Ok(AccessTriple { model_id, enclave, user_id })
}

pub(crate) fn parse_req_key(body: &[u8]) -> Result<(String, Measurement, SymKey), KsError> {
    let mut r = Reader::new(body);
    let model_id = r.str16().ok_or_else(|| malformed("request key"))?.to_owned();
    let enclave = Measurement(Digest(r.array::<32>().ok_or_else(|| malformed("request key"))?));
    let key = SymKey::from_bytes(r.array::<32>().ok_or_else(|| malformed("request key"))?);
    finish(&r, "request key")?;
    Ok((model_id, enclave, key))
}
