// SPDX-License-Identifier: Apache-2.0

//! Per-request records, the metrics CSV and the JSON summary.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use teeinfer::runtime::InvocationPath;

use crate::clock::{us_to_ms, Micros};
use crate::costs::StageBreakdown;
use crate::workload::SessionStep;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Pending,
    Completed,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub user_id: String,
    pub model_id: String,
    pub session: Option<SessionStep>,
    pub submit_us: Micros,
    pub start_us: Option<Micros>,
    pub complete_us: Option<Micros>,
    pub status: RequestStatus,
    pub error: Option<String>,
    pub path: Option<InvocationPath>,
    pub endpoint: String,
    pub instance: Option<u64>,
    pub node: Option<usize>,
    pub stages: StageBreakdown,
    /// A model was loaded into an enclave that had already served requests.
    pub model_switch: bool,
    /// The client opened the result and it matched a direct evaluation.
    pub verified: bool,
}

impl RequestRecord {
    pub fn latency_us(&self) -> Option<Micros> {
        match self.status {
            RequestStatus::Completed => self.complete_us.map(|c| c - self.submit_us),
            _ => None,
        }
    }

    pub fn latency_ms(&self) -> Option<f64> {
        self.latency_us().map(us_to_ms)
    }
}

fn ms(us: Micros) -> String {
    format!("{:.3}", us_to_ms(us))
}

/// `request_id,submit_ms,complete_ms,latency_ms,path,endpoint,instance,node`,
/// fixed three-decimal milliseconds. Unfinished requests leave the time
/// columns empty and report their status as the path.
pub fn write_metrics_csv<W: Write>(records: &[RequestRecord], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["request_id", "submit_ms", "complete_ms", "latency_ms", "path", "endpoint", "instance", "node"])?;
    for r in records {
        let path = match (r.status, r.path) {
            (RequestStatus::Completed, Some(p)) => p.to_string(),
            (RequestStatus::Rejected, _) => "rejected".into(),
            _ => "pending".into(),
        };
        out.write_record([
            r.request_id.to_string(),
            ms(r.submit_us),
            r.complete_us.filter(|_| r.status == RequestStatus::Completed).map(ms).unwrap_or_default(),
            r.latency_us().map(ms).unwrap_or_default(),
            path,
            r.endpoint.clone(),
            r.instance.map(|i| i.to_string()).unwrap_or_default(),
            r.node.map(|n| n.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Rounds to microsecond precision so summaries are byte-stable.
fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl LatencyStats {
    pub fn from_ms(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        LatencyStats {
            count: v.len(),
            mean_ms: round3(v.iter().sum::<f64>() / v.len() as f64),
            p50_ms: percentile(&v, 50.0),
            p95_ms: percentile(&v, 95.0),
            p99_ms: percentile(&v, 99.0),
            max_ms: *v.last().unwrap(),
        }
    }

    pub fn of<'a>(records: impl IntoIterator<Item = &'a RequestRecord>) -> Self {
        Self::from_ms(records.into_iter().filter_map(RequestRecord::latency_ms).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounts {
    pub cold: usize,
    pub warm: usize,
    pub hot: usize,
}

impl PathCounts {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a RequestRecord>) -> Self {
        let mut c = PathCounts::default();
        for r in records.into_iter().filter(|r| r.status == RequestStatus::Completed) {
            match r.path {
                Some(InvocationPath::Cold) => c.cold += 1,
                Some(InvocationPath::Warm) => c.warm += 1,
                Some(InvocationPath::Hot) => c.hot += 1,
                None => {}
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub latency: LatencyStats,
    pub paths: PathCounts,
    pub model_switches: usize,
}

impl GroupSummary {
    fn of(records: &[&RequestRecord]) -> Self {
        GroupSummary {
            latency: LatencyStats::of(records.iter().copied()),
            paths: PathCounts::of(records.iter().copied()),
            model_switches: records.iter().filter(|r| r.model_switch).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub session: u32,
    pub step: u32,
    pub model_id: String,
    pub endpoint: String,
    pub latency_ms: Option<f64>,
    pub path: Option<InvocationPath>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlatformCounters {
    pub instances_started: u64,
    pub instances_reaped: u64,
    pub instances_evicted: u64,
    pub provisioning_calls: u64,
    pub router_overflow_routes: u64,
    pub router_accounting_errors: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub requests: usize,
    pub completed: usize,
    pub rejected: usize,
    pub pending_at_horizon: usize,
    pub verified: usize,
    pub warmup_s: f64,
    /// Requests submitted after the warmup.
    pub overall: GroupSummary,
    pub by_user: BTreeMap<String, GroupSummary>,
    pub by_model: BTreeMap<String, GroupSummary>,
    pub by_endpoint: BTreeMap<String, GroupSummary>,
    pub sessions: Vec<SessionRow>,
    pub gb_s: f64,
    pub gb_s_by_endpoint: BTreeMap<String, f64>,
    pub horizon_s: f64,
    pub counters: PlatformCounters,
}

impl Summary {
    pub fn build(
        variant: &str,
        records: &[RequestRecord],
        warmup_us: Micros,
        gb_s: f64,
        gb_s_by_endpoint: BTreeMap<String, f64>,
        horizon_us: Micros,
        counters: PlatformCounters,
    ) -> Self {
        let measured: Vec<&RequestRecord> = records.iter().filter(|r| r.submit_us >= warmup_us).collect();
        let group = |key: &dyn Fn(&RequestRecord) -> String| {
            let mut m: BTreeMap<String, Vec<&RequestRecord>> = BTreeMap::new();
            for r in &measured {
                m.entry(key(r)).or_default().push(r);
            }
            m.into_iter().map(|(k, v)| (k, GroupSummary::of(&v))).collect()
        };
        let count = |s: RequestStatus| records.iter().filter(|r| r.status == s).count();
        let mut sessions: Vec<SessionRow> = records
            .iter()
            .filter_map(|r| {
                r.session.map(|s| SessionRow {
                    session: s.session,
                    step: s.index,
                    model_id: r.model_id.clone(),
                    endpoint: r.endpoint.clone(),
                    latency_ms: r.latency_ms(),
                    path: r.path,
                })
            })
            .collect();
        sessions.sort_by_key(|s| (s.session, s.step));
        Summary {
            variant: variant.to_owned(),
            requests: records.len(),
            completed: count(RequestStatus::Completed),
            rejected: count(RequestStatus::Rejected),
            pending_at_horizon: count(RequestStatus::Pending),
            verified: records.iter().filter(|r| r.verified).count(),
            warmup_s: warmup_us as f64 / 1e6,
            overall: GroupSummary::of(&measured),
            by_user: group(&|r| r.user_id.clone()),
            by_model: group(&|r| r.model_id.clone()),
            by_endpoint: group(&|r| r.endpoint.clone()),
            sessions,
            gb_s: round3(gb_s * 1000.0) / 1000.0,
            gb_s_by_endpoint: gb_s_by_endpoint.into_iter().map(|(k, v)| (k, round3(v * 1000.0) / 1000.0)).collect(),
            horizon_s: horizon_us as f64 / 1e6,
            counters,
        }
    }

    pub fn session_paths(&self, session: u32) -> PathCounts {
        let mut c = PathCounts::default();
        for s in self.sessions.iter().filter(|s| s.session == session) {
            match s.path {
                Some(InvocationPath::Cold) => c.cold += 1,
                Some(InvocationPath::Warm) => c.warm += 1,
                Some(InvocationPath::Hot) => c.hot += 1,
                None => {}
            }
        }
        c
    }
}

/// Latency statistics of requests submitted in `[from_us, to_us)`.
pub fn window_stats(records: &[RequestRecord], from_us: Micros, to_us: Micros) -> LatencyStats {
    LatencyStats::of(records.iter().filter(|r| r.submit_us >= from_us && r.submit_us < to_us))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn stats_basic() {
        let s = LatencyStats::from_ms(vec![3.0, 1.0, 2.0]);
        assert_eq!((s.count, s.mean_ms, s.p50_ms, s.max_ms), (3, 2.0, 2.0, 3.0));
    }
}
