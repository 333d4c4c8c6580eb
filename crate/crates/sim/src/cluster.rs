// SPDX-License-Identifier: Apache-2.0

//! Nodes and memory-only instance placement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::Micros;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub invoker_memory_mb: u64,
    #[serde(default = "default_cores")]
    pub cores: usize,
}

fn default_cores() -> usize {
    12
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: usize,
    pub spec: NodeSpec,
    pub used_mb: u64,
    /// endpoint → live instances on this node.
    pub hosted: BTreeMap<String, u32>,
    pub in_service: usize,
    enclave_inits: Vec<(Micros, Micros)>,
    attestations: Vec<(Micros, Micros)>,
}

impl Node {
    pub fn new(id: usize, spec: NodeSpec) -> Self {
        Node { id, spec, used_mb: 0, hosted: BTreeMap::new(), in_service: 0, enclave_inits: Vec::new(), attestations: Vec::new() }
    }

    pub fn free_mb(&self) -> u64 {
        self.spec.invoker_memory_mb.saturating_sub(self.used_mb)
    }

    pub fn hosts(&self, endpoint: &str) -> bool {
        self.hosted.get(endpoint).is_some_and(|&n| n > 0)
    }

    pub fn place(&mut self, endpoint: &str, budget_mb: u64) {
        assert!(self.free_mb() >= budget_mb, "node {} over-committed", self.id);
        self.used_mb += budget_mb;
        *self.hosted.entry(endpoint.to_owned()).or_insert(0) += 1;
    }

    pub fn release(&mut self, endpoint: &str, budget_mb: u64) {
        self.used_mb = self.used_mb.saturating_sub(budget_mb);
        if let Some(n) = self.hosted.get_mut(endpoint) {
            *n -= 1;
            if *n == 0 {
                self.hosted.remove(endpoint);
            }
        }
    }

    fn overlapping(list: &mut Vec<(Micros, Micros)>, t: Micros) -> usize {
        list.retain(|&(_, end)| end > t);
        list.iter().filter(|&&(start, _)| start <= t).count()
    }

    /// Records an enclave launch over `[start, end)` and returns how many
    /// launches (including this one) run concurrently at `start`.
    pub fn begin_enclave_init(&mut self, start: Micros) -> usize {
        Self::overlapping(&mut self.enclave_inits, start) + 1
    }

    pub fn end_enclave_init(&mut self, start: Micros, end: Micros) {
        self.enclave_inits.push((start, end));
    }

    pub fn begin_attestation(&mut self, start: Micros) -> usize {
        Self::overlapping(&mut self.attestations, start) + 1
    }

    pub fn end_attestation(&mut self, start: Micros, end: Micros) {
        self.attestations.push((start, end));
    }
}

/// Picks a node for a new instance of `endpoint`: a node already hosting
/// the endpoint if it has room, else the first node with room.
pub fn node_schedule(nodes: &[Node], endpoint: &str, budget_mb: u64) -> Option<usize> {
    let fits = |n: &&Node| n.free_mb() >= budget_mb;
    nodes
        .iter()
        .filter(fits)
        .find(|n| n.hosts(endpoint))
        .or_else(|| nodes.iter().find(fits))
        .map(|n| n.id)
}
