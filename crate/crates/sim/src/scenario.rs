// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration and variant runner.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::s_to_us;
use crate::costs::{ModelProfile, StageCosts};
use crate::fnpacker::{FnPool, RouterConfig};
use crate::metrics::{write_metrics_csv, Summary};
use crate::platform::{round_budget, FunctionSpec, Platform, PlatformConfig, RuntimePolicy, SimError, SimOutput};
use crate::workload::{interactive_sessions, merge, mmpp_trace, poisson_trace, Trace, TraceError, TraceEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deployment {
    /// One endpoint per model.
    OneToOne,
    /// A single endpoint serving every model.
    AllInOne,
    /// A pool of interchangeable endpoints behind the packing router.
    Fnpacker,
}

impl Deployment {
    pub fn name(self) -> &'static str {
        match self {
            Deployment::OneToOne => "one_to_one",
            Deployment::AllInOne => "all_in_one",
            Deployment::Fnpacker => "fnpacker",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunctionTemplate {
    pub tcs_count: usize,
    pub isolation: bool,
    pub memory_budget_mb: Option<u64>,
}

impl Default for FunctionTemplate {
    fn default() -> Self {
        FunctionTemplate { tcs_count: 1, isolation: false, memory_budget_mb: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackerSection {
    /// Endpoints in the pool; defaults to `min(models, 4)`.
    pub endpoints: Option<usize>,
    pub router: RouterConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Poisson {
        user: String,
        model: String,
        rate_rps: f64,
        duration_s: f64,
        #[serde(default)]
        start_s: f64,
    },
    Mmpp {
        user: String,
        model: String,
        rate_low: f64,
        rate_high: f64,
        #[serde(default = "default_switch_s")]
        switch_s: f64,
        duration_s: f64,
    },
    Sessions {
        user: String,
        models: Vec<String>,
        at_s: Vec<f64>,
        #[serde(default)]
        gap_ms: f64,
    },
    Sequence {
        user: String,
        model: String,
        at_s: Vec<f64>,
    },
    Trace {
        path: PathBuf,
    },
}

fn default_switch_s() -> f64 {
    60.0
}

fn default_policies() -> Vec<RuntimePolicy> {
    vec![RuntimePolicy::FullReuse]
}

fn default_deployments() -> Vec<Deployment> {
    vec![Deployment::OneToOne]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub horizon_s: Option<f64>,
    #[serde(default)]
    pub warmup_s: f64,
    #[serde(default = "default_policies")]
    pub policies: Vec<RuntimePolicy>,
    #[serde(default = "default_deployments")]
    pub deployments: Vec<Deployment>,
    #[serde(default)]
    pub cluster: PlatformConfig,
    #[serde(default)]
    pub costs: StageCosts,
    #[serde(default)]
    pub function: FunctionTemplate,
    #[serde(default)]
    pub fnpacker: PackerSection,
    pub models: Vec<ModelProfile>,
    #[serde(default)]
    pub workload: Vec<WorkloadSpec>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("metrics: {0}")]
    Csv(#[from] csv::Error),
    #[error("summary: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io { path: path.to_owned(), source }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        if self.policies.is_empty() || self.deployments.is_empty() {
            return bad("policies and deployments must be nonempty".into());
        }
        if !(self.warmup_s >= 0.0) || self.horizon_s.is_some_and(|h| !(h >= 0.0)) {
            return bad("warmup_s and horizon_s must be nonnegative".into());
        }
        if self.fnpacker.endpoints == Some(0) {
            return bad("fnpacker.endpoints must be at least 1".into());
        }
        let known = |m: &str| self.models.iter().any(|p| p.id == m);
        for w in &self.workload {
            let (models, rates): (Vec<&str>, Vec<f64>) = match w {
                WorkloadSpec::Poisson { model, rate_rps, duration_s, .. } => (vec![model], vec![*rate_rps, *duration_s]),
                WorkloadSpec::Mmpp { model, rate_low, rate_high, switch_s, duration_s, .. } => {
                    (vec![model], vec![*rate_low, *rate_high, *switch_s, *duration_s])
                }
                WorkloadSpec::Sessions { models, at_s, gap_ms, .. } => {
                    if models.is_empty() {
                        return bad("a session workload needs at least one model".into());
                    }
                    (models.iter().map(String::as_str).collect(), at_s.iter().copied().chain([*gap_ms]).collect())
                }
                WorkloadSpec::Sequence { model, at_s, .. } => (vec![model], at_s.clone()),
                WorkloadSpec::Trace { .. } => (vec![], vec![]),
            };
            if let Some(m) = models.iter().find(|m| !known(m)) {
                return bad(format!("workload references unknown model {m}"));
            }
            if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return bad("workload rates, durations and times must be finite and nonnegative".into());
            }
        }
        Ok(())
    }

    /// Builds the merged trace; relative trace paths resolve against `base`.
    pub fn build_trace(&self, base: &Path) -> Result<Trace, ScenarioError> {
        let mut parts = Vec::new();
        let mut next_session = 0;
        for (i, w) in self.workload.iter().enumerate() {
            let seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1);
            let t = match w {
                WorkloadSpec::Poisson { user, model, rate_rps, duration_s, start_s } => {
                    let mut t = poisson_trace(*rate_rps, *duration_s, user, model, seed);
                    let shift = s_to_us(*start_s);
                    t.events.iter_mut().for_each(|e| e.t_us += shift);
                    t
                }
                WorkloadSpec::Mmpp { user, model, rate_low, rate_high, switch_s, duration_s } => {
                    mmpp_trace(*rate_low, *rate_high, *switch_s, *duration_s, user, model, seed)
                }
                WorkloadSpec::Sessions { user, models, at_s, gap_ms } => {
                    let ms: Vec<&str> = models.iter().map(String::as_str).collect();
                    let t = interactive_sessions(&ms, at_s, *gap_ms, user, next_session);
                    next_session += at_s.len() as u32;
                    t
                }
                WorkloadSpec::Sequence { user, model, at_s } => Trace {
                    events: at_s
                        .iter()
                        .map(|&s| TraceEvent { t_us: s_to_us(s), user_id: user.clone(), model_id: model.clone(), session: None })
                        .collect(),
                },
                WorkloadSpec::Trace { path } => {
                    let p = base.join(path);
                    let f = fs::File::open(&p).map_err(io_err(&p))?;
                    let mut t = Trace::read_csv(f)?;
                    // Sessions from files are renumbered after generated ones.
                    let mut max = None;
                    for e in t.events.iter_mut() {
                        if let Some(s) = e.session.as_mut() {
                            s.session += next_session;
                            max = max.max(Some(s.session));
                        }
                    }
                    if let Some(m) = max {
                        next_session = m + 1;
                    }
                    t
                }
            };
            parts.push(t);
        }
        Ok(merge(&parts))
    }
}

pub fn variant_name(policy: RuntimePolicy, deployment: Deployment) -> String {
    format!("{}-{}", policy.name(), deployment.name())
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: String,
    pub policy: RuntimePolicy,
    pub deployment: Deployment,
    pub output: SimOutput,
    pub summary: Summary,
}

impl VariantResult {
    pub fn metrics_csv(&self) -> Result<Vec<u8>, ScenarioError> {
        let mut buf = Vec::new();
        write_metrics_csv(&self.output.records, &mut buf)?;
        Ok(buf)
    }

    pub fn summary_json(&self) -> Result<String, ScenarioError> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }
}

/// Builds the platform for one variant without running it.
pub fn build_platform(cfg: &ExperimentConfig, policy: RuntimePolicy, deployment: Deployment) -> Result<Platform, ScenarioError> {
    cfg.validate()?;
    let mut p = Platform::new(cfg.cluster.clone(), cfg.costs.clone(), cfg.models.clone(), cfg.seed)?;
    let ids: Vec<String> = cfg.models.iter().map(|m| m.id.clone()).collect();
    let spec = |endpoint_id: String, models: Vec<String>| FunctionSpec {
        endpoint_id,
        models,
        policy,
        tcs_count: cfg.function.tcs_count,
        isolation: cfg.function.isolation,
        memory_budget_mb: cfg.function.memory_budget_mb,
    };
    match deployment {
        Deployment::OneToOne => {
            for m in &ids {
                p.register_endpoint(spec(format!("ep-{m}"), vec![m.clone()]))?;
            }
        }
        Deployment::AllInOne => {
            p.register_endpoint(spec("ep-all".into(), ids.clone()))?;
        }
        Deployment::Fnpacker => {
            let n = cfg.fnpacker.endpoints.unwrap_or(ids.len().min(4));
            let budget = match cfg.function.memory_budget_mb {
                Some(b) => b,
                None => round_budget(p.required_mb(&ids, cfg.function.tcs_count)?),
            };
            let pool = FnPool {
                pool_id: "pool".into(),
                models: ids.iter().cloned().collect(),
                memory_budget_mb: budget,
                endpoints: (0..n).map(|i| format!("pool-e{i}")).collect(),
            };
            p.deploy_pool(pool, &spec(String::new(), vec![]), cfg.fnpacker.router.clone())?;
        }
    }
    Ok(p)
}

pub fn run_variant(cfg: &ExperimentConfig, trace: &Trace, policy: RuntimePolicy, deployment: Deployment) -> Result<VariantResult, ScenarioError> {
    let mut p = build_platform(cfg, policy, deployment)?;
    p.load_trace(trace);
    let output = p.run(cfg.horizon_s.map(s_to_us));
    let name = variant_name(policy, deployment);
    let summary = Summary::build(
        &name,
        &output.records,
        s_to_us(cfg.warmup_s),
        output.gb_s,
        output.gb_s_by_endpoint.clone(),
        output.horizon_us,
        output.counters.clone(),
    );
    Ok(VariantResult { name, policy, deployment, output, summary })
}

/// Runs every policy × deployment combination on one shared trace.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path) -> Result<Vec<VariantResult>, ScenarioError> {
    cfg.validate()?;
    let trace = cfg.build_trace(base)?;
    let mut out = Vec::new();
    for &d in &cfg.deployments {
        for &p in &cfg.policies {
            tracing::info!(variant = %variant_name(p, d), requests = trace.len(), "simulating");
            out.push(run_variant(cfg, &trace, p, d)?);
        }
    }
    Ok(out)
}

/// Writes `<dir>/<variant>/metrics.csv` and `summary.json` for each result.
pub fn write_results(results: &[VariantResult], dir: &Path) -> Result<(), ScenarioError> {
    for r in results {
        let d = dir.join(&r.name);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        let csv = d.join("metrics.csv");
        fs::write(&csv, r.metrics_csv()?).map_err(io_err(&csv))?;
        let js = d.join("summary.json");
        fs::write(&js, r.summary_json()?).map_err(io_err(&js))?;
    }
    Ok(())
}
