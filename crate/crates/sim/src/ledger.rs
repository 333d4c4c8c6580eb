// SPDX-License-Identifier: Apache-2.0

//! Memory-time cost accounting. An instance is billed its full budget from
//! creation until it is reaped (or the horizon), busy or idle.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::clock::{Micros, US_PER_S};

pub const MB_PER_GB: u64 = 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub instance: u64,
    pub endpoint: String,
    pub budget_mb: u64,
    pub start_us: Micros,
    pub end_us: Option<Micros>,
}

impl LedgerEntry {
    /// Billed MB·µs up to `horizon`.
    fn mb_us(&self, horizon: Micros) -> u128 {
        let end = self.end_us.unwrap_or(horizon).min(horizon);
        let dur = end.saturating_sub(self.start_us);
        self.budget_mb as u128 * dur as u128
    }
}

#[derive(Clone, Debug, Default)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
    open: BTreeMap<u64, usize>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&mut self, instance: u64, endpoint: &str, budget_mb: u64, t: Micros) {
        assert!(!self.open.contains_key(&instance), "instance {instance} already open");
        self.open.insert(instance, self.entries.len());
        self.entries.push(LedgerEntry { instance, endpoint: endpoint.to_owned(), budget_mb, start_us: t, end_us: None });
    }

    pub fn close(&mut self, instance: u64, t: Micros) {
        if let Some(i) = self.open.remove(&instance) {
            self.entries[i].end_us = Some(t.max(self.entries[i].start_us));
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn open_count(&self) -> usize {
        self.open.len()
    }

    /// Exact GB·seconds up to `horizon`, summed in integer MB·µs.
    pub fn account(&self, horizon: Micros) -> f64 {
        let total: u128 = self.entries.iter().map(|e| e.mb_us(horizon)).sum();
        mb_us_to_gb_s(total)
    }

    pub fn account_by_endpoint(&self, horizon: Micros) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, u128> = BTreeMap::new();
        for e in &self.entries {
            *acc.entry(e.endpoint.clone()).or_default() += e.mb_us(horizon);
        }
        acc.into_iter().map(|(k, v)| (k, mb_us_to_gb_s(v))).collect()
    }
}

pub fn mb_us_to_gb_s(mb_us: u128) -> f64 {
    let per_gb_s = (MB_PER_GB as u128) * (US_PER_S as u128);
    (mb_us / per_gb_s) as f64 + (mb_us % per_gb_s) as f64 / per_gb_s as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_instances_ten_seconds() {
        let mut l = CostLedger::new();
        l.open(1, "a", 256, 0);
        l.open(2, "a", 256, 0);
        l.close(1, 10 * US_PER_S);
        l.close(2, 10 * US_PER_S);
        assert_eq!(l.account(u64::MAX), 5.0);
    }

    #[test]
    fn horizon_clips_open_and_closed() {
        let mut l = CostLedger::new();
        l.open(1, "a", 1024, 2 * US_PER_S);
        l.open(2, "b", 512, 0);
        l.close(2, 8 * US_PER_S);
        assert_eq!(l.account(4 * US_PER_S), 2.0 + 2.0);
        assert_eq!(l.account(10 * US_PER_S), 8.0 + 4.0);
        let by = l.account_by_endpoint(10 * US_PER_S);
        assert_eq!(by["a"], 8.0);
        assert_eq!(by["b"], 4.0);
    }

    #[test]
    fn close_before_start_bills_nothing() {
        let mut l = CostLedger::new();
        l.open(1, "a", 128, 50);
        l.close(1, 10);
        assert_eq!(l.account(100), 0.0);
        assert_eq!(l.open_count(), 0);
    }
}
