// SPDX-License-Identifier: Apache-2.0

//! Model files, request inputs and inference outputs.
//!
//! Model file: `"SSMI" ‖ 0x01 ‖ u16-BE id length ‖ id ‖ AeadEnvelope`. The
//! envelope is sealed under `K_M` with AAD `"model|<id>|-"` and holds
//! `u32-BE rows ‖ u32-BE cols ‖ row-major f64-LE weights ‖ f64-LE bias`.

use super::RuntimeError;
use crate::crypto::{aead_decrypt, aead_encrypt, context_aad, AeadEnvelope, CryptoError, Purpose, SymKey};
use crate::scalar::Scalar;
use crate::wire::{put_str16, Reader};

pub const MODEL_MAGIC: &[u8; 4] = b"SSMI";
pub const MODEL_VERSION: u8 = 1;

/// A linear scorer `scores = W·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel<T> {
    pub model_id: String,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    /// Size charged for memory and cost accounting. Never below the
    /// serialized size.
    pub declared_size_bytes: u64,
}

impl<T: Scalar> LinearModel<T> {
    pub fn new(model_id: impl Into<String>, rows: usize, cols: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self, RuntimeError> {
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(RuntimeError::Malformed(format!(
                "{} weights and {} biases for a {rows}x{cols} model",
                weights.len(),
                bias.len()
            )));
        }
        let declared_size_bytes = serialized_len(rows, cols) as u64;
        Ok(LinearModel { model_id: model_id.into(), rows, cols, weights, bias, declared_size_bytes })
    }

    pub fn with_declared_size(mut self, bytes: u64) -> Self {
        self.declared_size_bytes = bytes.max(serialized_len(self.rows, self.cols) as u64);
        self
    }

    pub fn to_plaintext(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(serialized_len(self.rows, self.cols));
        out.extend_from_slice(&(self.rows as u32).to_be_bytes());
        out.extend_from_slice(&(self.cols as u32).to_be_bytes());
        for v in self.weights.iter().chain(&self.bias) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }

    pub fn from_plaintext(model_id: &str, bytes: &[u8]) -> Result<Self, RuntimeError> {
        let bad = || RuntimeError::Malformed("model body".into());
        let mut r = Reader::new(bytes);
        let rows = r.u32_be().ok_or_else(bad)? as usize;
        let cols = r.u32_be().ok_or_else(bad)? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_add(rows)).ok_or_else(bad)?;
        if n.checked_mul(8).and_then(|b| b.checked_add(8)) != Some(bytes.len()) {
            return Err(bad());
        }
        let vals: Vec<T> = (0..n).map(|_| T::from_f64(r.f64_le().unwrap())).collect();
        let (weights, bias) = vals.split_at(rows * cols);
        Self::new(model_id, rows, cols, weights.to_vec(), bias.to_vec())
    }
}

fn serialized_len(rows: usize, cols: usize) -> usize {
    8 + 8 * (rows * cols + rows)
}

pub fn model_aad(model_id: &str) -> Vec<u8> {
    context_aad(Purpose::Model, model_id, "")
}

/// Seals a model into the on-disk format.
pub fn encode_model_file<T: Scalar>(model: &LinearModel<T>, k_m: &SymKey) -> Result<Vec<u8>, CryptoError> {
    let env = aead_encrypt(k_m, &model.to_plaintext(), &model_aad(&model.model_id))?;
    let mut out = Vec::with_capacity(7 + model.model_id.len() + env.encoded_len());
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    put_str16(&mut out, &model.model_id);
    out.extend_from_slice(&env.to_bytes());
    Ok(out)
}

/// Splits a model file into its id and sealed body without decrypting.
pub fn parse_model_file(bytes: &[u8]) -> Result<(String, AeadEnvelope), RuntimeError> {
    let mut r = Reader::new(bytes);
    if r.take(4) != Some(MODEL_MAGIC.as_slice()) {
        return Err(RuntimeError::Malformed("bad model file magic".into()));
    }
    if r.array::<1>() != Some([MODEL_VERSION]) {
        return Err(RuntimeError::Malformed("unsupported model file version".into()));
    }
    let id = r.str16().ok_or_else(|| RuntimeError::Malformed("model file header".into()))?.to_owned();
    let env = AeadEnvelope::from_bytes(r.rest()).map_err(|e| RuntimeError::Malformed(e.to_string()))?;
    Ok((id, env))
}

/// Opens a model file for `expected_id`.
pub fn decode_model_file<T: Scalar>(expected_id: &str, bytes: &[u8], k_m: &SymKey) -> Result<LinearModel<T>, RuntimeError> {
    let (id, env) = parse_model_file(bytes)?;
    if id != expected_id {
        return Err(RuntimeError::Malformed(format!("model file holds {id:?}, expected {expected_id:?}")));
    }
    let pt = aead_decrypt(k_m, &env, &model_aad(&id)).map_err(|_| RuntimeError::ModelIntegrity(id.clone()))?;
    let m = LinearModel::from_plaintext(&id, &pt)?;
    Ok(m.with_declared_size(bytes.len() as u64))
}

/// Request plaintext: `u32-LE n ‖ n × f64-LE`.
pub fn encode_input<T: Scalar>(x: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * x.len());
    out.extend_from_slice(&(x.len() as u32).to_le_bytes());
    for v in x {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub fn decode_input<T: Scalar>(bytes: &[u8]) -> Result<Vec<T>, RuntimeError> {
    let mut r = Reader::new(bytes);
    let n = r.u32_le().ok_or_else(|| RuntimeError::Malformed("input header".into()))? as usize;
    if bytes.len() != 4 + 8 * n {
        return Err(RuntimeError::Malformed(format!("input declares {n} values in {} bytes", bytes.len())));
    }
    Ok((0..n).map(|_| T::from_f64(r.f64_le().unwrap())).collect())
}

/// Decoded inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutput {
    pub argmax: u32,
    pub scores: Vec<f64>,
}

impl InferenceOutput {
    /// `u32-LE argmax ‖ u32-LE n ‖ n × f64-LE`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.scores.len());
        out.extend_from_slice(&self.argmax.to_le_bytes());
        out.extend_from_slice(&(self.scores.len() as u32).to_le_bytes());
        for s in &self.scores {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RuntimeError> {
        let bad = || RuntimeError::Malformed("output".into());
        let mut r = Reader::new(bytes);
        let argmax = r.u32_le().ok_or_else(bad)?;
        let n = r.u32_le().ok_or_else(bad)? as usize;
        if bytes.len() != 8 + 8 * n {
            return Err(bad());
        }
        Ok(InferenceOutput { argmax, scores: (0..n).map(|_| r.f64_le().unwrap()).collect() })
    }
}
