// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use teeinfer_sim::clock::Micros;
use teeinfer_sim::cluster::NodeSpec;
use teeinfer_sim::costs::{ModelProfile, StageCosts};
use teeinfer_sim::{FunctionSpec, Platform, PlatformConfig, RuntimePolicy};

pub const S: Micros = 1_000_000;
pub const MS: Micros = 1_000;

pub fn profile(id: &str) -> ModelProfile {
    ModelProfile { enclave_mb: Some(64.0), ..ModelProfile::new(id, 10.0, 5.0, 50.0, 20.0) }
}

pub fn node(mb: u64) -> NodeSpec {
    NodeSpec { invoker_memory_mb: mb, cores: 12 }
}

pub fn config(nodes: Vec<NodeSpec>) -> PlatformConfig {
    PlatformConfig { nodes, ..PlatformConfig::default() }
}

pub fn spec(id: &str, models: &[&str], policy: RuntimePolicy) -> FunctionSpec {
    FunctionSpec {
        endpoint_id: id.into(),
        models: models.iter().map(|m| m.to_string()).collect(),
        policy,
        tcs_count: 1,
        isolation: false,
        memory_budget_mb: Some(256),
    }
}

/// One endpoint `ep` serving model `m` on a single roomy node.
pub fn single(policy: RuntimePolicy) -> Platform {
    let mut p = Platform::new(config(vec![node(4096)]), StageCosts::default(), vec![profile("m"), profile("n")], 1).unwrap();
    p.register_endpoint(spec("ep", &["m", "n"], policy)).unwrap();
    p
}
