// SPDX-License-Identifier: Apache-2.0

//! Discrete-event simulation of a serverless platform that hosts the
//! enclave runtime, plus the workload generators and the packing router.

pub mod clock;
pub mod cluster;
pub mod costs;
pub mod fnpacker;
pub mod functional;
pub mod ledger;
pub mod metrics;
pub mod platform;
pub mod scenario;
pub mod workload;

pub use platform::{FunctionSpec, Platform, PlatformConfig, RuntimePolicy, SimError, SimOutput};
pub use scenario::{run_experiment, run_variant, Deployment, ExperimentConfig, VariantResult};
