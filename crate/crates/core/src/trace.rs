//! Execution trace events and their JSON emission. The output is a JSON
//! array of events with the fields {name, category, rank, worker, start_us,
//! dur_us} plus the Chrome trace-event keys (ph/ts/dur/pid/tid/cat) so the
//! files load directly in common trace viewers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventCategory {
    S2M,
    M2M,
    M2L,
    L2L,
    L2T,
    NF,
    SEND,
    RECV,
}

impl EventCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventCategory::S2M => "S2M",
            EventCategory::M2M => "M2M",
            EventCategory::M2L => "M2L",
            EventCategory::L2L => "L2L",
            EventCategory::L2T => "L2T",
            EventCategory::NF => "NF",
            EventCategory::SEND => "SEND",
            EventCategory::RECV => "RECV",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub category: EventCategory,
    pub rank: usize,
    pub worker: usize,
    pub start_us: u64,
    pub dur_us: u64,
}

/// Serializes events as a JSON array readable both by this crate and by
/// Chrome-trace viewers (rank maps to pid, worker lane to tid).
pub fn to_chrome_json(events: &[TraceEvent]) -> String {
    let mut entries = Vec::with_capacity(events.len());
    for e in events {
        entries.push(serde_json::json!({
            "name": e.name,
            "category": e.category.as_str(),
            "rank": e.rank,
            "worker": e.worker,
            "start_us": e.start_us,
            "dur_us": e.dur_us,
            "ph": "X",
            "cat": e.category.as_str(),
            "ts": e.start_us,
            "dur": e.dur_us,
            "pid": e.rank,
            "tid": e.worker,
        }));
    }
    serde_json::to_string_pretty(&entries).expect("trace serialization")
}

/// Summary statistics of a trace: per-category busy time and the largest
/// idle gap of any worker lane between its first and last event.
#[derive(Debug, Clone, Serialize)]
pub struct TraceStats {
    pub span_us: u64,
    pub per_category_us: Vec<(String, u64)>,
    pub max_worker_idle_us: u64,
    pub n_events: usize,
}

pub fn trace_stats(events: &[TraceEvent]) -> TraceStats {
    use std::collections::BTreeMap;
    let mut per_cat: BTreeMap<&'static str, u64> = BTreeMap::new();
    let mut span: u64 = 0;
    for e in events {
        *per_cat.entry(e.category.as_str()).or_insert(0) += e.dur_us;
        span = span.max(e.start_us + e.dur_us);
    }
    let mut lanes: BTreeMap<(usize, usize), Vec<(u64, u64)>> = BTreeMap::new();
    for e in events {
        if matches!(e.category, EventCategory::SEND | EventCategory::RECV) {
            continue;
        }
        lanes.entry((e.rank, e.worker)).or_default().push((e.start_us, e.start_us + e.dur_us));
    }
    let mut max_gap = 0u64;
    for intervals in lanes.values_mut() {
        intervals.sort_unstable();
        for w in intervals.windows(2) {
            max_gap = max_gap.max(w[1].0.saturating_sub(w[0].1));
        }
    }
    TraceStats {
        span_us: span,
        per_category_us: per_cat.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        max_worker_idle_us: max_gap,
        n_events: events.len(),
    }
}
