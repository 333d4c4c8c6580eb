// SPDX-License-Identifier: Apache-2.0

//! Inference backend interface and the reference linear backend.

use std::marker::PhantomData;

use super::model::{decode_input, decode_model_file, InferenceOutput, LinearModel};
use super::RuntimeError;
use crate::crypto::SymKey;
use crate::scalar::{affine, argmax, Scalar};

/// What the enclave needs from an inference framework.
pub trait InferenceBackend: Send + Sync + 'static {
    type Model: Send + Sync + 'static;
    type Runtime: Send + 'static;

    fn name(&self) -> &str;
    /// Decrypts and deserializes a model file copied into the enclave.
    fn model_load(&self, model_id: &str, file: &[u8], k_m: &SymKey) -> Result<Self::Model, RuntimeError>;
    fn model_size(&self, model: &Self::Model) -> u64;
    fn runtime_init(&self, model_id: &str, model: &Self::Model, buffer_bytes: usize) -> Result<Self::Runtime, RuntimeError>;
    fn runtime_model(&self, rt: &Self::Runtime) -> String;
    fn model_exec(&self, data: &[u8], model: &Self::Model, rt: &mut Self::Runtime) -> Result<(), RuntimeError>;
    fn prepare_output(&self, rt: &mut Self::Runtime) -> Result<Vec<u8>, RuntimeError>;
}

pub struct LinearRuntime<T> {
    model_id: String,
    scratch: Vec<u8>,
    scores: Vec<T>,
    ready: bool,
}

impl<T> LinearRuntime<T> {
    pub fn buffer_len(&self) -> usize {
        self.scratch.len()
    }
}

/// Reference backend: dense linear scorer over `T`.
pub struct LinearBackend<T> {
    _t: PhantomData<fn() -> T>,
}

impl<T> Default for LinearBackend<T> {
    fn default() -> Self {
        LinearBackend { _t: PhantomData }
    }
}

impl<T: Scalar> InferenceBackend for LinearBackend<T> {
    type Model = LinearModel<T>;
    type Runtime = LinearRuntime<T>;

    fn name(&self) -> &str {
        if std::mem::size_of::<T>() == 4 {
            "linear-f32"
        } else {
            "linear-f64"
        }
    }

    fn model_load(&self, model_id: &str, file: &[u8], k_m: &SymKey) -> Result<Self::Model, RuntimeError> {
        decode_model_file(model_id, file, k_m)
    }

    fn model_size(&self, model: &Self::Model) -> u64 {
        model.declared_size_bytes
    }

    fn runtime_init(&self, model_id: &str, model: &Self::Model, buffer_bytes: usize) -> Result<Self::Runtime, RuntimeError> {
        Ok(LinearRuntime { model_id: model_id.to_owned(), scratch: vec![0; buffer_bytes], scores: Vec::with_capacity(model.rows), ready: false })
    }

    fn runtime_model(&self, rt: &Self::Runtime) -> String {
        rt.model_id.clone()
    }

    fn model_exec(&self, data: &[u8], model: &Self::Model, rt: &mut Self::Runtime) -> Result<(), RuntimeError> {
        let x: Vec<T> = decode_input(data)?;
        if x.len() != model.cols {
            return Err(RuntimeError::Exec(format!("input has {} values, model expects {}", x.len(), model.cols)));
        }
        affine(&model.weights, model.rows, model.cols, &model.bias, &x, &mut rt.scores);
        rt.ready = true;
        Ok(())
    }

    fn prepare_output(&self, rt: &mut Self::Runtime) -> Result<Vec<u8>, RuntimeError> {
        if !std::mem::take(&mut rt.ready) {
            return Err(RuntimeError::NoOutput);
        }
        let out = InferenceOutput {
            argmax: argmax(&rt.scores).unwrap_or(0) as u32,
            scores: rt.scores.iter().map(|s| s.as_f64()).collect(),
        };
        Ok(out.to_bytes())
    }
}
