// SPDX-License-Identifier: Apache-2.0

//! Seeded request-trace generators.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ms_to_us, s_to_us, us_to_ms, Micros};

/// A closed-loop request: issued only after the previous request of the
/// same session completes (plus the gap).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStep {
    pub session: u32,
    pub index: u32,
    pub gap_us: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    /// Submit time; for closed-loop steps after the first, the earliest time.
    pub t_us: Micros,
    pub user_id: String,
    pub model_id: String,
    pub session: Option<SessionStep>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace row {row}: {msg}")]
    Row { row: usize, msg: String },
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t_us <= w[1].t_us)
    }

    /// Writes `t_ms,user_id,model_id,session,step,gap_ms`; the last three
    /// columns are empty for open-loop requests.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TraceError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_ms", "user_id", "model_id", "session", "step", "gap_ms"])?;
        for e in &self.events {
            let (s, i, g) = match e.session {
                Some(s) => (s.session.to_string(), s.index.to_string(), format!("{:.3}", us_to_ms(s.gap_us))),
                None => Default::default(),
            };
            out.write_record([format!("{:.3}", us_to_ms(e.t_us)), e.user_id.clone(), e.model_id.clone(), s, i, g])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a trace; only the first three columns are required.
    pub fn read_csv<R: Read>(r: R) -> Result<Trace, TraceError> {
        let mut rd = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(r);
        let mut events = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            let bad = |msg: &str| TraceError::Row { row, msg: msg.to_owned() };
            let field = |k: usize| rec.get(k).unwrap_or("");
            let t: f64 = field(0).parse().map_err(|_| bad("t_ms is not a number"))?;
            if !(t.is_finite() && t >= 0.0) {
                return Err(bad("t_ms must be a nonnegative number"));
            }
            if field(1).is_empty() || field(2).is_empty() {
                return Err(bad("user_id and model_id are required"));
            }
            let session = if field(3).is_empty() {
                None
            } else {
                Some(SessionStep {
                    session: field(3).parse().map_err(|_| bad("session"))?,
                    index: field(4).parse().map_err(|_| bad("step"))?,
                    gap_us: ms_to_us(field(5).parse().map_err(|_| bad("gap_ms"))?),
                })
            };
            events.push(TraceEvent { t_us: ms_to_us(t), user_id: field(1).to_owned(), model_id: field(2).to_owned(), session });
        }
        let mut t = Trace { events };
        t.events.sort_by_key(|e| e.t_us);
        Ok(t)
    }
}

fn exp_arrivals(rng: &mut ChaCha20Rng, rate_rps: f64, from_s: f64, to_s: f64, out: &mut Vec<f64>) {
    if rate_rps <= 0.0 || !rate_rps.is_finite() {
        return;
    }
    let exp = Exp::new(rate_rps).expect("positive rate");
    let mut t = from_s;
    loop {
        t += exp.sample(rng);
        if t >= to_s {
            break;
        }
        out.push(t);
    }
}

fn open_loop(times: Vec<f64>, user: &str, model: &str) -> Trace {
    Trace {
        events: times
            .into_iter()
            .map(|t| TraceEvent { t_us: s_to_us(t), user_id: user.to_owned(), model_id: model.to_owned(), session: None })
            .collect(),
    }
}

/// Poisson arrivals at `rate_rps` over `[0, duration_s)`.
pub fn poisson_trace(rate_rps: f64, duration_s: f64, user: &str, model: &str, seed: u64) -> Trace {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut times = Vec::new();
    exp_arrivals(&mut rng, rate_rps, 0.0, duration_s, &mut times);
    open_loop(times, user, model)
}

/// Two-state modulated Poisson process starting in the low state and
/// switching every `switch_interval_s`.
pub fn mmpp_trace(rate_low: f64, rate_high: f64, switch_interval_s: f64, duration_s: f64, user: &str, model: &str, seed: u64) -> Trace {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut times = Vec::new();
    if switch_interval_s <= 0.0 {
        exp_arrivals(&mut rng, rate_low, 0.0, duration_s, &mut times);
        return open_loop(times, user, model);
    }
    let mut start = 0.0;
    let mut high = false;
    while start < duration_s {
        let end = (start + switch_interval_s).min(duration_s);
        // Memorylessness lets each phase restart its arrival clock.
        exp_arrivals(&mut rng, if high { rate_high } else { rate_low }, start, end, &mut times);
        start = end;
        high = !high;
    }
    open_loop(times, user, model)
}

/// Start and end of the high-rate phases of an MMPP trace.
pub fn mmpp_bursts(switch_interval_s: f64, duration_s: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if switch_interval_s <= 0.0 {
        return out;
    }
    let mut start = switch_interval_s;
    while start < duration_s {
        out.push((start, (start + switch_interval_s).min(duration_s)));
        start += 2.0 * switch_interval_s;
    }
    out
}

/// One closed-loop session per entry of `session_times_s`, querying
/// `models` in order. Session ids are numbered from `first_session`.
pub fn interactive_sessions(models: &[&str], session_times_s: &[f64], gap_ms: f64, user: &str, first_session: u32) -> Trace {
    let gap_us = ms_to_us(gap_ms);
    let mut events = Vec::new();
    for (k, &t) in session_times_s.iter().enumerate() {
        for (i, m) in models.iter().enumerate() {
            events.push(TraceEvent {
                t_us: s_to_us(t) + i as u64 * gap_us,
                user_id: user.to_owned(),
                model_id: (*m).to_owned(),
                session: Some(SessionStep { session: first_session + k as u32, index: i as u32, gap_us }),
            });
        }
    }
    events.sort_by_key(|e| e.t_us);
    Trace { events }
}

/// Stable time-ordered merge; ties keep argument order.
pub fn merge(traces: &[Trace]) -> Trace {
    let mut events: Vec<TraceEvent> = traces.iter().flat_map(|t| t.events.iter().cloned()).collect();
    events.sort_by_key(|e| e.t_us);
    Trace { events }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_and_duration_are_empty() {
        assert!(poisson_trace(0.0, 100.0, "u", "m", 1).is_empty());
        assert!(mmpp_trace(20.0, 40.0, 60.0, 0.0, "u", "m", 1).is_empty());
        assert!(interactive_sessions(&["a"], &[], 0.0, "u", 0).is_empty());
    }

    #[test]
    fn bursts_alternate() {
        assert_eq!(mmpp_bursts(60.0, 300.0), vec![(60.0, 120.0), (180.0, 240.0)]);
        assert_eq!(mmpp_bursts(60.0, 100.0), vec![(60.0, 100.0)]);
    }

    #[test]
    fn csv_round_trip() {
        let t = merge(&[poisson_trace(3.0, 20.0, "alice", "m0", 9), interactive_sessions(&["m1", "m2"], &[5.0], 10.0, "bob", 3)]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(Trace::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn csv_accepts_three_columns() {
        let t = Trace::read_csv("t_ms,user_id,model_id\n1.5,u,m\n0.5,v,n\n".as_bytes()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.events[0].t_us, 500);
        assert!(t.events.iter().all(|e| e.session.is_none()));
        assert!(Trace::read_csv("t_ms,user_id,model_id\nx,u,m\n".as_bytes()).is_err());
        assert!(Trace::read_csv("t_ms,user_id,model_id\n-1,u,m\n".as_bytes()).is_err());
    }
}
