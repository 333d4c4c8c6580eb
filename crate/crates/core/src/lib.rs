// SPDX-License-Identifier: Apache-2.0

//! Confidential model serving: attested key distribution and an enclave
//! runtime that reuses models, runtimes and keys across requests.

pub mod attestation;
pub mod clients;
pub mod crypto;
pub mod keyservice;
pub mod runtime;
pub mod scalar;
pub mod wire;

pub use num_rational::Ratio;

/// Exact rational used by the memory model.
pub type Exact = Ratio<u64>;

pub type LinearModelF32 = runtime::model::LinearModel<f32>;
pub type LinearModelF64 = runtime::model::LinearModel<f64>;
pub type LinearBackendF32 = runtime::backend::LinearBackend<f32>;
pub type LinearBackendF64 = runtime::backend::LinearBackend<f64>;
pub type MemoryParamsF64 = runtime::memory::MemoryParams<f64>;
pub type MemoryParamsExact = runtime::memory::MemoryParams<Exact>;

/// Reference enclave over 64-bit weights.
pub type LinearEnclave = runtime::Enclave<LinearBackendF64>;
