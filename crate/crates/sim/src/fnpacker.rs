// SPDX-License-Identifier: Apache-2.0

//! Router for multi-model endpoint pools.
//!
//! A model with responses still pending keeps being sent to the endpoint
//! serving it, which then becomes exclusive to that model. Other requests go
//! to an idle endpoint still reserved for their model, else to the first
//! endpoint that is not busy. An exclusive endpoint is released
//! once it has seen no request for `idle_interval`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use teeinfer::runtime::InvocationPath;
use thiserror::Error;

use crate::clock::{ms_to_us, Micros};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnPool {
    pub pool_id: String,
    pub models: BTreeSet<String>,
    pub memory_budget_mb: u64,
    pub endpoints: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    /// Lower bound on the idle interval, in milliseconds.
    pub min_idle_ms: f64,
    /// Multiple of the exclusive model's hot latency.
    pub idle_hot_multiple: f64,
    pub ewma_alpha: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig { min_idle_ms: 10_000.0, idle_hot_multiple: 2.0, ewma_alpha: 0.2 }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouterError {
    #[error("pool {0} already deployed")]
    DuplicatePool(String),
    #[error("pool {0} has no endpoints")]
    EmptyPool(String),
    #[error("model {model} already belongs to pool {pool}")]
    ModelInPool { model: String, pool: String },
    #[error("endpoint {0} already belongs to a pool")]
    EndpointInPool(String),
    #[error("no pool serves model {0}")]
    UnknownModel(String),
    #[error("completion for {model} on {endpoint} has no pending request")]
    UnmatchedCompletion { model: String, endpoint: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EndpointStats {
    pub endpoint_id: String,
    pub pending: BTreeMap<String, u32>,
    pub last_invocation: BTreeMap<String, Micros>,
    pub last_request: Option<Micros>,
    pub exclusive_for: Option<String>,
    pub exclusive_since: Option<Micros>,
    /// model → path → EWMA latency (ms).
    pub latency_ewma: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EndpointStats {
    fn new(id: &str) -> Self {
        EndpointStats { endpoint_id: id.to_owned(), ..Default::default() }
    }

    pub fn pending_for(&self, model: &str) -> u32 {
        self.pending.get(model).copied().unwrap_or(0)
    }

    pub fn pending_total(&self) -> u32 {
        self.pending.values().sum()
    }

    fn hot_ewma(&self, model: &str) -> Option<f64> {
        self.latency_ewma.get(model)?.get("hot").copied()
    }

    fn idle_interval(&self, cfg: &RouterConfig) -> Micros {
        let hot = self.exclusive_for.as_deref().and_then(|m| self.hot_ewma(m)).unwrap_or(0.0);
        ms_to_us((cfg.idle_hot_multiple * hot).max(cfg.min_idle_ms))
    }

    fn idle_for(&self, t: Micros) -> Micros {
        self.last_request.map_or(Micros::MAX, |l| t.saturating_sub(l))
    }

    fn not_busy(&self, model: &str, t: Micros, cfg: &RouterConfig) -> bool {
        let free = self.pending_total() == 0 && self.exclusive_for.as_deref().is_none_or(|m| m == model);
        let reclaimable = self.exclusive_for.is_some() && self.idle_for(t) >= self.idle_interval(cfg);
        free || reclaimable
    }
}

/// Per-model view summed over a pool's endpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ModelStats {
    pub model_id: String,
    pub pending: u32,
    pub last_invocation: Option<Micros>,
    pub latency_ewma: BTreeMap<String, f64>,
}

/// Why an endpoint was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteReason {
    Pending,
    NotBusy,
    Overflow,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct PoolState {
    spec: FnPool,
    endpoints: Vec<EndpointStats>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FnPacker {
    cfg: RouterConfig,
    pools: BTreeMap<String, PoolState>,
    #[serde(skip)]
    model_pool: BTreeMap<String, String>,
    #[serde(skip)]
    endpoint_pool: BTreeMap<String, String>,
    pub accounting_errors: u64,
    pub overflow_routes: u64,
}

impl FnPacker {
    pub fn new(cfg: RouterConfig) -> Self {
        FnPacker { cfg, ..Default::default() }
    }

    pub fn config(&self) -> &RouterConfig {
        &self.cfg
    }

    pub fn deploy_pool(&mut self, spec: FnPool) -> Result<Vec<String>, RouterError> {
        if self.pools.contains_key(&spec.pool_id) {
            return Err(RouterError::DuplicatePool(spec.pool_id));
        }
        if spec.endpoints.is_empty() {
            return Err(RouterError::EmptyPool(spec.pool_id));
        }
        if let Some(m) = spec.models.iter().find(|m| self.model_pool.contains_key(*m)) {
            return Err(RouterError::ModelInPool { model: m.clone(), pool: self.model_pool[m].clone() });
        }
        let mut seen = BTreeSet::new();
        if let Some(e) = spec.endpoints.iter().find(|e| self.endpoint_pool.contains_key(*e) || !seen.insert(*e)) {
            return Err(RouterError::EndpointInPool(e.clone()));
        }
        for m in &spec.models {
            self.model_pool.insert(m.clone(), spec.pool_id.clone());
        }
        for e in &spec.endpoints {
            self.endpoint_pool.insert(e.clone(), spec.pool_id.clone());
        }
        let endpoints = spec.endpoints.iter().map(|e| EndpointStats::new(e)).collect();
        let ids = spec.endpoints.clone();
        self.pools.insert(spec.pool_id.clone(), PoolState { spec, endpoints });
        Ok(ids)
    }

    pub fn pool_of(&self, model: &str) -> Option<&FnPool> {
        self.model_pool.get(model).map(|p| &self.pools[p].spec)
    }

    fn pool_mut(&mut self, model: &str) -> Result<&mut PoolState, RouterError> {
        let p = self.model_pool.get(model).ok_or_else(|| RouterError::UnknownModel(model.to_owned()))?;
        Ok(self.pools.get_mut(p).expect("pool index"))
    }

    pub fn route(&mut self, model: &str, t: Micros) -> Result<String, RouterError> {
        self.route_with_reason(model, t).map(|(e, _)| e)
    }

    pub fn route_with_reason(&mut self, model: &str, t: Micros) -> Result<(String, RouteReason), RouterError> {
        let cfg = self.cfg.clone();
        let pool = self.pool_mut(model)?;
        let eps = &mut pool.endpoints;
        let (i, reason) = if let Some(i) = eps.iter().position(|e| e.pending_for(model) > 0) {
            if eps[i].exclusive_for.as_deref() != Some(model) {
                eps[i].exclusive_for = Some(model.to_owned());
                eps[i].exclusive_since = Some(t);
            }
            (i, RouteReason::Pending)
        } else if let Some(i) = eps
            .iter()
            // An endpoint still reserved for this model comes first.
            .position(|e| e.exclusive_for.as_deref() == Some(model) && e.not_busy(model, t, &cfg))
            .or_else(|| eps.iter().position(|e| e.not_busy(model, t, &cfg)))
        {
            if eps[i].exclusive_for.as_deref().is_some_and(|m| m != model) {
                eps[i].exclusive_for = None;
                eps[i].exclusive_since = None;
            }
            (i, RouteReason::NotBusy)
        } else {
            let lru = |only_exclusive: bool| {
                eps.iter()
                    .enumerate()
                    .filter(|(_, e)| !only_exclusive || e.exclusive_for.is_some())
                    .min_by_key(|(i, e)| (e.last_request.unwrap_or(0), *i))
                    .map(|(i, _)| i)
            };
            (lru(true).or_else(|| lru(false)).expect("pool has endpoints"), RouteReason::Overflow)
        };
        let ep = &mut eps[i];
        *ep.pending.entry(model.to_owned()).or_insert(0) += 1;
        ep.last_request = Some(t);
        let id = ep.endpoint_id.clone();
        if reason == RouteReason::Overflow {
            self.overflow_routes += 1;
        }
        Ok((id, reason))
    }

    pub fn complete(&mut self, model: &str, endpoint: &str, latency_ms: f64, path: InvocationPath, t: Micros) -> Result<(), RouterError> {
        let alpha = self.cfg.ewma_alpha;
        let ep = self.release(model, endpoint)?;
        ep.last_invocation.insert(model.to_owned(), t);
        let slot = ep.latency_ewma.entry(model.to_owned()).or_default().entry(path.to_string()).or_insert(latency_ms);
        *slot += alpha * (latency_ms - *slot);
        Ok(())
    }

    /// Releases a routed request that produced no response. Latency
    /// estimates and idle clocks are left alone.
    pub fn abandon(&mut self, model: &str, endpoint: &str) -> Result<(), RouterError> {
        self.release(model, endpoint).map(|_| ())
    }

    fn release(&mut self, model: &str, endpoint: &str) -> Result<&mut EndpointStats, RouterError> {
        let unmatched = || RouterError::UnmatchedCompletion { model: model.to_owned(), endpoint: endpoint.to_owned() };
        let ep = self
            .model_pool
            .get(model)
            .and_then(|p| self.pools.get_mut(p))
            .and_then(|p| p.endpoints.iter_mut().find(|e| e.endpoint_id == endpoint));
        let Some(ep) = ep.filter(|e| e.pending_for(model) > 0) else {
            self.accounting_errors += 1;
            return Err(unmatched());
        };
        let n = ep.pending.get_mut(model).expect("pending entry");
        *n -= 1;
        if *n == 0 {
            ep.pending.remove(model);
        }
        Ok(ep)
    }

    pub fn endpoint_stats(&self) -> Vec<EndpointStats> {
        self.pools.values().flat_map(|p| p.endpoints.iter().cloned()).collect()
    }

    pub fn endpoint(&self, id: &str) -> Option<&EndpointStats> {
        self.pools.values().flat_map(|p| p.endpoints.iter()).find(|e| e.endpoint_id == id)
    }

    pub fn model_stats(&self, model: &str) -> Option<ModelStats> {
        let pool = &self.pools[self.model_pool.get(model)?];
        let mut s = ModelStats { model_id: model.to_owned(), ..Default::default() };
        let mut weight: BTreeMap<String, u32> = BTreeMap::new();
        for e in &pool.endpoints {
            s.pending += e.pending_for(model);
            if let Some(&li) = e.last_invocation.get(model) {
                s.last_invocation = Some(s.last_invocation.map_or(li, |x| x.max(li)));
            }
            for (path, v) in e.latency_ewma.get(model).into_iter().flatten() {
                *s.latency_ewma.entry(path.clone()).or_insert(0.0) += v;
                *weight.entry(path.clone()).or_insert(0) += 1;
            }
        }
        for (path, v) in s.latency_ewma.iter_mut() {
            *v /= weight[path] as f64;
        }
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n_models: usize, n_eps: usize) -> FnPacker {
        let mut r = FnPacker::new(RouterConfig::default());
        r.deploy_pool(FnPool {
            pool_id: "p".into(),
            models: (0..n_models).map(|i| format!("m{i}")).collect(),
            memory_budget_mb: 768,
            endpoints: (0..n_eps).map(|i| format!("e{i}")).collect(),
        })
        .unwrap();
        r
    }

    const S: Micros = 1_000_000;

    #[test]
    fn pending_model_pins_and_marks_exclusive() {
        let mut r = pool(3, 3);
        assert_eq!(r.route("m0", 0).unwrap(), "e0");
        assert!(r.endpoint("e0").unwrap().exclusive_for.is_none());
        assert_eq!(r.route("m0", 1).unwrap(), "e0");
        assert_eq!(r.endpoint("e0").unwrap().exclusive_for.as_deref(), Some("m0"));
        assert_eq!(r.route("m1", 2).unwrap(), "e1");
        r.complete("m0", "e0", 10.0, InvocationPath::Hot, 3).unwrap();
        r.complete("m0", "e0", 10.0, InvocationPath::Hot, 4).unwrap();
        // e0 is idle but still exclusive for m0 until the interval passes.
        assert_eq!(r.route("m2", 5).unwrap(), "e2");
        r.complete("m2", "e2", 10.0, InvocationPath::Cold, 6).unwrap();
        r.complete("m1", "e1", 10.0, InvocationPath::Cold, 6).unwrap();
        assert_eq!(r.route("m2", 11 * S).unwrap(), "e0");
        assert!(r.endpoint("e0").unwrap().exclusive_for.is_none());
    }

    #[test]
    fn sequential_one_shots_share_one_endpoint() {
        let mut r = pool(5, 4);
        for m in ["m0", "m0", "m1", "m1"] {
            r.route(m, 0).unwrap();
        }
        let mut used = BTreeSet::new();
        for (k, m) in ["m2", "m3", "m4"].iter().enumerate() {
            let t = (k as u64 + 1) * S;
            let e = r.route(m, t).unwrap();
            r.complete(m, &e, 100.0, InvocationPath::Warm, t + 1).unwrap();
            used.insert(e);
        }
        assert_eq!(used.into_iter().collect::<Vec<_>>(), vec!["e2".to_string()]);
    }

    #[test]
    fn overflow_goes_to_lru_exclusive() {
        let mut r = pool(3, 2);
        r.route("m0", 0).unwrap();
        r.route("m0", 1).unwrap();
        r.route("m1", 2).unwrap();
        r.route("m1", 3).unwrap();
        let (e, why) = r.route_with_reason("m2", 4).unwrap();
        assert_eq!((e.as_str(), why), ("e0", RouteReason::Overflow));
        assert_eq!(r.overflow_routes, 1);
    }

    #[test]
    fn double_completion_counts_error() {
        let mut r = pool(1, 1);
        let e = r.route("m0", 0).unwrap();
        r.complete("m0", &e, 5.0, InvocationPath::Cold, 1).unwrap();
        let before = r.endpoint_stats();
        assert!(r.complete("m0", &e, 5.0, InvocationPath::Cold, 2).is_err());
        assert_eq!(r.accounting_errors, 1);
        assert_eq!(r.endpoint_stats(), before);
        assert!(r.complete("zz", &e, 5.0, InvocationPath::Cold, 2).is_err());
        assert_eq!(r.accounting_errors, 2);
    }

    #[test]
    fn ewma_moves_toward_observation() {
        let mut r = pool(1, 1);
        for (lat, t) in [(100.0, 1), (200.0, 2)] {
            let e = r.route("m0", t).unwrap();
            r.complete("m0", &e, lat, InvocationPath::Hot, t).unwrap();
        }
        let v = r.endpoint("e0").unwrap().latency_ewma["m0"]["hot"];
        assert!((v - 120.0).abs() < 1e-12);
        assert_eq!(r.model_stats("m0").unwrap().latency_ewma["hot"], v);
    }

    #[test]
    fn deploy_errors() {
        let mut r = pool(2, 2);
        let dup = FnPool { pool_id: "p".into(), models: BTreeSet::new(), memory_budget_mb: 128, endpoints: vec!["x".into()] };
        assert!(matches!(r.deploy_pool(dup.clone()), Err(RouterError::DuplicatePool(_))));
        let empty = FnPool { pool_id: "q".into(), endpoints: vec![], ..dup.clone() };
        assert!(matches!(r.deploy_pool(empty), Err(RouterError::EmptyPool(_))));
        let taken = FnPool { pool_id: "q".into(), models: ["m1".to_string()].into(), ..dup.clone() };
        assert!(matches!(r.deploy_pool(taken), Err(RouterError::ModelInPool { .. })));
        let ep = FnPool { pool_id: "q".into(), endpoints: vec!["e0".into()], ..dup };
        assert!(matches!(r.deploy_pool(ep), Err(RouterError::EndpointInPool(_))));
        assert!(matches!(r.route("nope", 0), Err(RouterError::UnknownModel(_))));
    }
}
