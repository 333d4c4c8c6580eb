// SPDX-License-Identifier: Apache-2.0

//! Discrete-event serverless platform.
//!
//! Endpoints own pools of sandbox instances placed on nodes by memory.
//! Each instance hosts a functional enclave; a request is really sealed,
//! served and opened at dispatch time, and the work the enclave reports
//! (handshake, provisioning, model load, runtime init) decides which stage
//! costs are charged in virtual time.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use teeinfer::attestation::Measurement;
use teeinfer::runtime::{InvocationOutcome, RuntimeConfig};
use teeinfer::LinearEnclave;
use thiserror::Error;
use tracing::{debug, trace};

use crate::clock::{ms_to_us, s_to_us, us_to_ms, EventQueue, Micros};
use crate::cluster::{node_schedule, Node, NodeSpec};
use crate::costs::{ModelProfile, StageBreakdown, StageCosts, Storage};
use crate::fnpacker::{FnPacker, FnPool, RouterConfig, RouterError};
use crate::functional::Functional;
use crate::ledger::{CostLedger, LedgerEntry};
use crate::metrics::{PlatformCounters, RequestRecord, RequestStatus};
use crate::workload::{Trace, TraceEvent};

pub const BUDGET_STEP_MB: u64 = 128;

/// How an endpoint treats its enclave between requests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimePolicy {
    /// A fresh sandbox and enclave for every request.
    Native,
    /// Enclave, channel and keys are reused; model and runtime are not.
    IsoReuse,
    /// Everything is reused.
    FullReuse,
}

impl RuntimePolicy {
    pub fn name(self) -> &'static str {
        match self {
            RuntimePolicy::Native => "native",
            RuntimePolicy::IsoReuse => "iso_reuse",
            RuntimePolicy::FullReuse => "full_reuse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub endpoint_id: String,
    pub models: Vec<String>,
    pub policy: RuntimePolicy,
    pub tcs_count: usize,
    /// Sequential isolation: runtime and keys cleared after each request.
    pub isolation: bool,
    /// Defaults to the smallest 128 MB multiple covering the largest model.
    pub memory_budget_mb: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlatformConfig {
    pub nodes: Vec<NodeSpec>,
    pub keep_warm_s: f64,
    pub storage: Storage,
    /// Container and enclave bookkeeping on top of model and buffers.
    pub container_overhead_mb: f64,
    /// Enclave memory per node above which execution slows down.
    pub epc_limit_mb: Option<u64>,
    pub epc_slowdown: f64,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            nodes: vec![NodeSpec { invoker_memory_mb: 16384, cores: 12 }],
            keep_warm_s: 180.0,
            storage: Storage::Local,
            container_overhead_mb: 100.0,
            epc_limit_mb: None,
            epc_slowdown: 2.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("endpoint {0} already registered")]
    DuplicateEndpoint(String),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("endpoint {endpoint}: budget {budget_mb} MB exceeds every node")]
    BudgetTooLarge { endpoint: String, budget_mb: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error("functional setup: {0}")]
    Functional(String),
}

/// Smallest multiple of 128 MB that is at least `required_mb`.
pub fn round_budget(required_mb: f64) -> u64 {
    let mb = required_mb.max(1.0).ceil() as u64;
    mb.div_ceil(BUDGET_STEP_MB) * BUDGET_STEP_MB
}

struct Endpoint {
    spec: FunctionSpec,
    budget_mb: u64,
    config: RuntimeConfig,
    measurement: Measurement,
    queue: VecDeque<u64>,
    instances: BTreeSet<u64>,
}

/// Read-only view of a live instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InstanceView {
    pub id: u64,
    pub endpoint: String,
    pub node: usize,
    pub busy: usize,
    pub created_at: Micros,
    pub last_used: Micros,
    pub loaded_model: Option<String>,
}

struct Instance {
    id: u64,
    endpoint: usize,
    node: usize,
    enclave: Option<LinearEnclave>,
    slots: Vec<bool>,
    /// `(user, model)` while any slot is busy.
    pair: Option<(String, String)>,
    loaded_model: Option<String>,
    last_user: Option<String>,
    created_at: Micros,
    last_used: Micros,
    /// When the model shared by concurrent requests is ready.
    shared_ready_at: Micros,
    fresh_sandbox: bool,
    reap_token: u64,
}

impl Instance {
    fn busy(&self) -> usize {
        self.slots.iter().filter(|&&b| b).count()
    }

    fn free_slot(&self) -> Option<usize> {
        self.slots.iter().position(|&b| !b)
    }
}

enum Event {
    Arrival { ev: TraceEvent, endpoint: Option<usize> },
    Complete { instance: u64, slot: usize, request: u64 },
    Reap { instance: u64, token: u64 },
}

enum Routing {
    Direct(BTreeMap<String, usize>),
    Packer(FnPacker),
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub records: Vec<RequestRecord>,
    pub ledger: Vec<LedgerEntry>,
    pub gb_s: f64,
    pub gb_s_by_endpoint: BTreeMap<String, f64>,
    pub horizon_us: Micros,
    pub counters: PlatformCounters,
}

pub struct Platform {
    cfg: PlatformConfig,
    costs: StageCosts,
    profiles: BTreeMap<String, ModelProfile>,
    functional: Functional,
    nodes: Vec<Node>,
    endpoints: Vec<Endpoint>,
    endpoint_index: BTreeMap<String, usize>,
    instances: BTreeMap<u64, Instance>,
    next_instance: u64,
    ledger: CostLedger,
    events: EventQueue<Event>,
    records: Vec<RequestRecord>,
    routing: Routing,
    sessions: BTreeMap<u32, VecDeque<TraceEvent>>,
    counters: PlatformCounters,
}

impl Platform {
    pub fn new(cfg: PlatformConfig, costs: StageCosts, profiles: Vec<ModelProfile>, seed: u64) -> Result<Self, SimError> {
        if cfg.nodes.is_empty() {
            return Err(SimError::Config("at least one node is required".into()));
        }
        if !(cfg.keep_warm_s >= 0.0) {
            return Err(SimError::Config("keep_warm_s must be nonnegative".into()));
        }
        let mut seen = BTreeSet::new();
        for p in &profiles {
            if !seen.insert(p.id.clone()) {
                return Err(SimError::Config(format!("model {} declared twice", p.id)));
            }
            if p.model_mb < 0.0 || p.runtime_buffer_mb < 0.0 || p.hot_exec_ms < 0.0 || p.runtime_init_pct < 0.0 {
                return Err(SimError::Config(format!("model {} has a negative size or cost", p.id)));
            }
        }
        let functional = Functional::new(seed, &profiles).map_err(|e| SimError::Functional(e.to_string()))?;
        let nodes = cfg.nodes.iter().cloned().enumerate().map(|(i, s)| Node::new(i, s)).collect();
        Ok(Platform {
            cfg,
            costs,
            profiles: profiles.into_iter().map(|p| (p.id.clone(), p)).collect(),
            functional,
            nodes,
            endpoints: Vec::new(),
            endpoint_index: BTreeMap::new(),
            instances: BTreeMap::new(),
            next_instance: 0,
            ledger: CostLedger::new(),
            events: EventQueue::new(),
            records: Vec::new(),
            routing: Routing::Direct(BTreeMap::new()),
            sessions: BTreeMap::new(),
            counters: PlatformCounters::default(),
        })
    }

    pub fn now(&self) -> Micros {
        self.events.now()
    }

    pub fn functional(&self) -> &Functional {
        &self.functional
    }

    /// Memory an endpoint's instances need for `models`.
    pub fn required_mb(&self, models: &[String], tcs: usize) -> Result<f64, SimError> {
        let mut need: f64 = 0.0;
        for m in models {
            let p = self.profiles.get(m).ok_or_else(|| SimError::UnknownModel(m.clone()))?;
            need = need.max(p.model_mb + tcs as f64 * p.runtime_buffer_mb);
        }
        Ok(need + self.cfg.container_overhead_mb)
    }

    pub fn register_endpoint(&mut self, spec: FunctionSpec) -> Result<u64, SimError> {
        if self.endpoint_index.contains_key(&spec.endpoint_id) {
            return Err(SimError::DuplicateEndpoint(spec.endpoint_id));
        }
        if spec.models.is_empty() {
            return Err(SimError::Config(format!("endpoint {} serves no models", spec.endpoint_id)));
        }
        let mut config = self.functional.base_config();
        config.tcs_count = spec.tcs_count;
        if spec.isolation {
            config = config.sequential_isolation();
        }
        if spec.policy == RuntimePolicy::IsoReuse {
            config.model_reuse = false;
        }
        config.validate().map_err(|e| SimError::Config(format!("endpoint {}: {e}", spec.endpoint_id)))?;
        let required = self.required_mb(&spec.models, config.tcs_count)?;
        let budget_mb = match spec.memory_budget_mb {
            Some(b) if b % BUDGET_STEP_MB != 0 || b == 0 => {
                return Err(SimError::Config(format!("endpoint {}: budget {b} MB is not a positive multiple of 128", spec.endpoint_id)))
            }
            Some(b) => b,
            None => round_budget(required),
        };
        if self.nodes.iter().all(|n| n.spec.invoker_memory_mb < budget_mb) {
            return Err(SimError::BudgetTooLarge { endpoint: spec.endpoint_id, budget_mb });
        }
        let measurement = self.functional.measurement(&config);
        let idx = self.endpoints.len();
        self.endpoint_index.insert(spec.endpoint_id.clone(), idx);
        if let Routing::Direct(map) = &mut self.routing {
            for m in &spec.models {
                map.entry(m.clone()).or_insert(idx);
            }
        }
        self.endpoints.push(Endpoint { spec, budget_mb, config, measurement, queue: VecDeque::new(), instances: BTreeSet::new() });
        Ok(budget_mb)
    }

    /// Registers one endpoint per pool slot and routes the pool's models
    /// through a packing router.
    pub fn deploy_pool(&mut self, pool: FnPool, template: &FunctionSpec, router: RouterConfig) -> Result<(), SimError> {
        if !self.endpoints.is_empty() && matches!(self.routing, Routing::Direct(_)) {
            return Err(SimError::Config("cannot mix pooled and direct endpoints".into()));
        }
        for e in &pool.endpoints {
            if self.endpoint_index.contains_key(e) {
                return Err(SimError::DuplicateEndpoint(e.clone()));
            }
        }
        let mut packer = match std::mem::replace(&mut self.routing, Routing::Direct(BTreeMap::new())) {
            Routing::Packer(p) => p,
            Routing::Direct(_) => FnPacker::new(router),
        };
        let result = packer.deploy_pool(pool.clone());
        self.routing = Routing::Packer(packer);
        result?;
        for e in &pool.endpoints {
            let spec = FunctionSpec {
                endpoint_id: e.clone(),
                models: pool.models.iter().cloned().collect(),
                memory_budget_mb: Some(pool.memory_budget_mb),
                ..template.clone()
            };
            self.register_endpoint(spec)?;
        }
        Ok(())
    }

    pub fn endpoint_budget(&self, endpoint: &str) -> Option<u64> {
        self.endpoint_index.get(endpoint).map(|&i| self.endpoints[i].budget_mb)
    }

    pub fn endpoint_measurement(&self, endpoint: &str) -> Option<Measurement> {
        self.endpoint_index.get(endpoint).map(|&i| self.endpoints[i].measurement)
    }

    pub fn router(&self) -> Option<&FnPacker> {
        match &self.routing {
            Routing::Packer(p) => Some(p),
            Routing::Direct(_) => None,
        }
    }

    pub fn instances(&self) -> Vec<InstanceView> {
        self.instances
            .values()
            .map(|i| InstanceView {
                id: i.id,
                endpoint: self.endpoints[i.endpoint].spec.endpoint_id.clone(),
                node: i.node,
                busy: i.busy(),
                created_at: i.created_at,
                last_used: i.last_used,
                loaded_model: i.loaded_model.clone(),
            })
            .collect()
    }

    pub fn records(&self) -> &[RequestRecord] {
        &self.records
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Schedules every event of `trace`. Closed-loop session steps after
    /// the first are issued when their predecessor finishes.
    pub fn load_trace(&mut self, trace: &Trace) {
        let mut later: BTreeMap<u32, Vec<TraceEvent>> = BTreeMap::new();
        for ev in &trace.events {
            match ev.session {
                Some(s) if s.index > 0 => later.entry(s.session).or_default().push(ev.clone()),
                _ => self.events.schedule(ev.t_us, Event::Arrival { ev: ev.clone(), endpoint: None }),
            }
        }
        for (s, mut evs) in later {
            evs.sort_by_key(|e| e.session.map(|x| x.index));
            self.sessions.entry(s).or_default().extend(evs);
        }
    }

    /// Submits one request through the routing layer.
    pub fn submit(&mut self, user: &str, model: &str, t: Micros) {
        let ev = TraceEvent { t_us: t, user_id: user.to_owned(), model_id: model.to_owned(), session: None };
        self.events.schedule(t, Event::Arrival { ev, endpoint: None });
    }

    /// Submits one request straight to `endpoint`.
    pub fn invoke(&mut self, endpoint: &str, user: &str, model: &str, t: Micros) -> Result<(), SimError> {
        let idx = *self.endpoint_index.get(endpoint).ok_or_else(|| SimError::UnknownEndpoint(endpoint.to_owned()))?;
        let ev = TraceEvent { t_us: t, user_id: user.to_owned(), model_id: model.to_owned(), session: None };
        self.events.schedule(t, Event::Arrival { ev, endpoint: Some(idx) });
        Ok(())
    }

    /// Processes events up to and including `until`.
    pub fn run_until(&mut self, until: Micros) {
        while let Some(t) = self.events.peek_time() {
            if t > until {
                break;
            }
            let (t, ev) = self.events.pop().expect("peeked");
            self.handle(t, ev);
        }
    }

    /// Runs to `horizon` (or until no events remain) and returns the results.
    pub fn run(mut self, horizon: Option<Micros>) -> SimOutput {
        self.run_until(horizon.unwrap_or(Micros::MAX));
        let horizon_us = horizon.unwrap_or_else(|| self.events.now());
        self.counters.provisioning_calls = self.functional.provision_calls();
        if let Routing::Packer(p) = &self.routing {
            self.counters.router_overflow_routes = p.overflow_routes;
            self.counters.router_accounting_errors = p.accounting_errors;
        }
        SimOutput {
            gb_s: self.ledger.account(horizon_us),
            gb_s_by_endpoint: self.ledger.account_by_endpoint(horizon_us),
            ledger: self.ledger.entries().to_vec(),
            records: self.records,
            horizon_us,
            counters: self.counters,
        }
    }

    fn handle(&mut self, t: Micros, ev: Event) {
        match ev {
            Event::Arrival { ev, endpoint } => self.on_arrival(t, ev, endpoint),
            Event::Complete { instance, slot, request } => self.on_complete(t, instance, slot, request),
            Event::Reap { instance, token } => {
                let due = self.instances.get(&instance).is_some_and(|i| {
                    i.reap_token == token && i.busy() == 0 && t.saturating_sub(i.last_used) >= s_to_us(self.cfg.keep_warm_s)
                });
                if due {
                    self.destroy(instance, t);
                    self.counters.instances_reaped += 1;
                    self.drain_all(t);
                }
            }
        }
    }

    fn reject(&mut self, id: u64, t: Micros, why: String) {
        debug!(request = id, %why, "request rejected");
        let r = &mut self.records[id as usize];
        r.status = RequestStatus::Rejected;
        r.complete_us = Some(t);
        r.error = Some(why);
        let session = r.session;
        self.continue_session(session, t);
    }

    fn continue_session(&mut self, step: Option<crate::workload::SessionStep>, t: Micros) {
        let Some(step) = step else { return };
        if let Some(next) = self.sessions.get_mut(&step.session).and_then(VecDeque::pop_front) {
            let at = t + next.session.map_or(0, |s| s.gap_us);
            self.events.schedule(at, Event::Arrival { ev: next, endpoint: None });
        }
    }

    fn on_arrival(&mut self, t: Micros, ev: TraceEvent, forced: Option<usize>) {
        let id = self.records.len() as u64;
        self.records.push(RequestRecord {
            request_id: id,
            user_id: ev.user_id.clone(),
            model_id: ev.model_id.clone(),
            session: ev.session,
            submit_us: t,
            start_us: None,
            complete_us: None,
            status: RequestStatus::Pending,
            error: None,
            path: None,
            endpoint: String::new(),
            instance: None,
            node: None,
            stages: StageBreakdown::default(),
            model_switch: false,
            verified: false,
        });
        let routed = match (forced, &mut self.routing) {
            (Some(i), _) => Ok(i),
            (None, Routing::Direct(map)) => map.get(&ev.model_id).copied().ok_or_else(|| format!("no endpoint serves {}", ev.model_id)),
            (None, Routing::Packer(p)) => p
                .route(&ev.model_id, t)
                .map_err(|e| e.to_string())
                .and_then(|e| self.endpoint_index.get(&e).copied().ok_or_else(|| format!("router chose unknown endpoint {e}"))),
        };
        let ep = match routed {
            Ok(ep) => ep,
            Err(why) => return self.reject(id, t, why),
        };
        self.records[id as usize].endpoint = self.endpoints[ep].spec.endpoint_id.clone();
        if !self.endpoints[ep].spec.models.contains(&ev.model_id) {
            return self.reject(id, t, format!("endpoint does not serve {}", ev.model_id));
        }
        let es = self.endpoints[ep].measurement;
        if let Err(e) = self.functional.ensure_access(&ev.user_id, &ev.model_id, es) {
            return self.reject(id, t, e.to_string());
        }
        if !(self.endpoints[ep].queue.is_empty() && self.try_dispatch(ep, id, t)) {
            trace!(request = id, endpoint = ep, "queued");
            self.endpoints[ep].queue.push_back(id);
        }
    }

    /// Finds or creates an instance for request `id`; false when the
    /// request has to wait.
    fn try_dispatch(&mut self, ep: usize, id: u64, t: Micros) -> bool {
        let (user, model) = {
            let r = &self.records[id as usize];
            (r.user_id.clone(), r.model_id.clone())
        };
        let e = &self.endpoints[ep];
        if e.spec.policy != RuntimePolicy::Native {
            let pair = Some((user.clone(), model.clone()));
            let join = e.instances.iter().copied().find(|i| {
                let inst = &self.instances[i];
                inst.busy() > 0 && inst.pair == pair && inst.free_slot().is_some()
            });
            if let Some(i) = join {
                self.start(i, id, t, true);
                return true;
            }
            // The invoker cannot see inside requests, so any idle instance
            // will do; the most recently used one keeps the rest ageing out.
            let idle = e
                .instances
                .iter()
                .map(|i| &self.instances[i])
                .filter(|i| i.busy() == 0)
                .min_by_key(|i| (std::cmp::Reverse(i.last_used), i.id))
                .map(|i| i.id);
            if let Some(i) = idle {
                self.start(i, id, t, false);
                return true;
            }
        }
        match self.place(ep, t) {
            Some(i) => {
                self.start(i, id, t, false);
                true
            }
            None => false,
        }
    }

    fn place(&mut self, ep: usize, t: Micros) -> Option<u64> {
        let budget = self.endpoints[ep].budget_mb;
        let name = self.endpoints[ep].spec.endpoint_id.clone();
        let node = match node_schedule(&self.nodes, &name, budget) {
            Some(n) => n,
            None => {
                self.evict_for(budget, t)?;
                node_schedule(&self.nodes, &name, budget)?
            }
        };
        let id = self.next_instance;
        self.next_instance += 1;
        self.nodes[node].place(&name, budget);
        self.ledger.open(id, &name, budget, t);
        self.endpoints[ep].instances.insert(id);
        let tcs = self.endpoints[ep].config.tcs_count;
        self.instances.insert(
            id,
            Instance {
                id,
                endpoint: ep,
                node,
                enclave: None,
                slots: vec![false; tcs],
                pair: None,
                loaded_model: None,
                last_user: None,
                created_at: t,
                last_used: t,
                shared_ready_at: t,
                fresh_sandbox: true,
                reap_token: 0,
            },
        );
        self.counters.instances_started += 1;
        debug!(instance = id, endpoint = %name, node, "cold start");
        Some(id)
    }

    /// Frees memory for a `budget_mb` instance by removing idle instances,
    /// least recently used first, on the first node where that suffices.
    fn evict_for(&mut self, budget_mb: u64, t: Micros) -> Option<()> {
        for n in 0..self.nodes.len() {
            let mut idle: Vec<(Micros, u64, u64)> = self
                .instances
                .values()
                .filter(|i| i.node == n && i.busy() == 0)
                .map(|i| (i.last_used, i.id, self.endpoints[i.endpoint].budget_mb))
                .collect();
            let free = self.nodes[n].free_mb();
            if free + idle.iter().map(|x| x.2).sum::<u64>() < budget_mb {
                continue;
            }
            idle.sort();
            let mut freed = free;
            for (_, id, b) in idle {
                if freed >= budget_mb {
                    break;
                }
                self.destroy(id, t);
                self.counters.instances_evicted += 1;
                freed += b;
            }
            return Some(());
        }
        None
    }

    fn destroy(&mut self, id: u64, t: Micros) {
        if let Some(inst) = self.instances.remove(&id) {
            let e = &mut self.endpoints[inst.endpoint];
            e.instances.remove(&id);
            self.nodes[inst.node].release(&e.spec.endpoint_id, e.budget_mb);
            self.ledger.close(id, t);
            debug!(instance = id, "instance removed");
        }
    }

    fn start(&mut self, iid: u64, id: u64, t: Micros, join: bool) {
        let (ep, node) = {
            let i = &self.instances[&iid];
            (i.endpoint, i.node)
        };
        let es = self.endpoints[ep].measurement;
        let (user, model) = {
            let r = &self.records[id as usize];
            (r.user_id.clone(), r.model_id.clone())
        };

        let (new_sandbox, new_enclave) = {
            let i = &self.instances[&iid];
            (i.fresh_sandbox, i.enclave.is_none())
        };
        if new_enclave {
            match self.functional.new_enclave(self.endpoints[ep].config.clone()) {
                Ok(enc) => {
                    if !new_sandbox {
                        enc.mark_warm_sandbox();
                    }
                    self.instances.get_mut(&iid).unwrap().enclave = Some(enc);
                }
                Err(e) => return self.fail_start(iid, id, t, e.to_string()),
            }
        }
        self.instances.get_mut(&iid).unwrap().fresh_sandbox = false;

        let inst = &self.instances[&iid];
        let slot = inst.free_slot().expect("dispatch picked an instance with a free slot");
        let (req, x) = match self.functional.build_request(&user, &model, es) {
            Ok(v) => v,
            Err(e) => return self.fail_start(iid, id, t, e.to_string()),
        };
        let enclave = inst.enclave.as_ref().expect("enclave created above");
        let served = enclave.ec_model_inf(&req, slot).and_then(|o| Ok((enclave.ec_get_output(slot)?, o)));
        let (env, InvocationOutcome { path, work }) = match served {
            Ok(v) => v,
            Err(e) => return self.fail_start(iid, id, t, e.to_string()),
        };
        let verified = self.functional.check_result(&user, &req, es, &env, &x);

        let profile = &self.profiles[&model];
        let c = &self.costs;
        let mut st = StageBreakdown { queue: t - self.records[id as usize].submit_us, ..Default::default() };
        if join {
            st.join_wait = inst.shared_ready_at.saturating_sub(t);
        }
        if new_sandbox {
            st.sandbox_init = ms_to_us(c.sandbox_init_ms);
        }
        let nd = &mut self.nodes[node];
        if new_enclave {
            let begin = t + st.sandbox_init;
            let conc = nd.begin_enclave_init(begin);
            st.enclave_init = ms_to_us(c.enclave_init_ms(profile.enclave_mb(self.endpoints[ep].config.tcs_count), conc));
            nd.end_enclave_init(begin, begin + st.enclave_init);
        }
        if work.handshake {
            let begin = t + st.join_wait + st.sandbox_init + st.enclave_init;
            let conc = nd.begin_attestation(begin);
            st.attestation = ms_to_us(c.attestation_ms(conc));
            nd.end_attestation(begin, begin + st.attestation);
        } else if work.provisioned {
            st.key_fetch = ms_to_us(c.key_fetch_ms);
        }
        if work.model_loaded {
            st.model_fetch = ms_to_us(c.fetch_ms(profile, self.cfg.storage));
            st.model_decrypt = ms_to_us(c.decrypt_ms(profile));
        }
        if work.runtime_init {
            st.runtime_init = ms_to_us(profile.runtime_init_ms());
        }
        nd.in_service += 1;
        let epc = match self.cfg.epc_limit_mb {
            Some(limit) if nd.used_mb > limit => self.cfg.epc_slowdown,
            _ => 1.0,
        };
        st.req_decrypt = ms_to_us(c.req_decrypt_ms);
        st.exec = ms_to_us(c.exec_ms(profile, nd.in_service, nd.spec.cores, epc));
        st.result_encrypt = ms_to_us(c.result_encrypt_ms);
        let done = t + st.service_total();

        let inst = self.instances.get_mut(&iid).unwrap();
        inst.slots[slot] = true;
        inst.pair = Some((user.clone(), model.clone()));
        inst.loaded_model = Some(model);
        inst.last_user = Some(user);
        inst.reap_token += 1;
        if !join {
            inst.shared_ready_at = t + st.setup_total();
        }

        let r = &mut self.records[id as usize];
        r.start_us = Some(t);
        r.complete_us = Some(done);
        r.path = Some(path);
        r.instance = Some(iid);
        r.node = Some(node);
        r.stages = st;
        r.model_switch = work.model_loaded && !new_enclave;
        r.verified = verified;
        debug_assert_eq!(done - r.submit_us, st.total());
        trace!(request = id, instance = iid, %path, latency_ms = us_to_ms(done - r.submit_us), "dispatched");
        self.events.schedule(done, Event::Complete { instance: iid, slot, request: id });
    }

    /// Rejects a request the instance could not serve and lets an idle
    /// instance age out as usual.
    fn fail_start(&mut self, iid: u64, id: u64, t: Micros, why: String) {
        self.reject(id, t, why);
        let Some(inst) = self.instances.get(&iid) else { return };
        if self.endpoints[inst.endpoint].spec.policy == RuntimePolicy::Native {
            self.destroy(iid, t);
        } else if inst.busy() == 0 {
            let token = inst.reap_token;
            self.events.schedule(t + s_to_us(self.cfg.keep_warm_s), Event::Reap { instance: iid, token });
        }
    }

    fn on_complete(&mut self, t: Micros, iid: u64, slot: usize, id: u64) {
        let inst = self.instances.get_mut(&iid).expect("completing instance is live");
        inst.slots[slot] = false;
        inst.last_used = t;
        let idle = inst.busy() == 0;
        if idle {
            inst.pair = None;
        }
        let (ep, node, token) = (inst.endpoint, inst.node, inst.reap_token);
        self.nodes[node].in_service -= 1;

        let r = &mut self.records[id as usize];
        r.status = RequestStatus::Completed;
        let (model, endpoint, session, path) = (r.model_id.clone(), r.endpoint.clone(), r.session, r.path);
        let latency = us_to_ms(t - r.submit_us);
        if let (Routing::Packer(p), Some(path)) = (&mut self.routing, path) {
            // Unmatched completions are counted by the router itself.
            let _ = p.complete(&model, &endpoint, latency, path, t);
        }
        self.continue_session(session, t);

        if self.endpoints[ep].spec.policy == RuntimePolicy::Native {
            self.destroy(iid, t);
            self.drain_all(t);
            return;
        }
        if idle {
            self.events.schedule(t + s_to_us(self.cfg.keep_warm_s), Event::Reap { instance: iid, token });
        }
        self.drain(ep, t);
    }

    fn drain(&mut self, ep: usize, t: Micros) {
        while let Some(&id) = self.endpoints[ep].queue.front() {
            if !self.try_dispatch(ep, id, t) {
                break;
            }
            self.endpoints[ep].queue.pop_front();
        }
    }

    fn drain_all(&mut self, t: Micros) {
        for ep in 0..self.endpoints.len() {
            self.drain(ep, t);
        }
    }

    /// Removes every instance idle for at least the keep-warm timeout.
    pub fn reap_idle(&mut self, t: Micros) -> Vec<u64> {
        let keep = s_to_us(self.cfg.keep_warm_s);
        let due: Vec<u64> = self.instances.values().filter(|i| i.busy() == 0 && t.saturating_sub(i.last_used) >= keep).map(|i| i.id).collect();
        for &id in &due {
            self.destroy(id, t);
            self.counters.instances_reaped += 1;
        }
        if !due.is_empty() {
            self.drain_all(t);
        }
        due
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_round_up_to_128() {
        assert_eq!(round_budget(1.0), 128);
        assert_eq!(round_budget(128.0), 128);
        assert_eq!(round_budget(128.5), 256);
        assert_eq!(round_budget(199.0), 256);
        assert_eq!(round_budget(0.0), 128);
    }
}
