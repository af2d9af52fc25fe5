//! Run metrics: traffic accounting, latency distributions, task counters.
//!
//! Everything in the report is derived from virtual time and message bytes,
//! so two runs with the same seed serialize to the same JSON. Wall-clock
//! decision timings are opt-in and omitted from the report unless measured.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::LogicalTime;

/// Summary of a latency sample set, all values in integer microseconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_us: u64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub max_us: u64,
}

impl LatencyStats {
    /// Computes stats over the samples. Returns None for an empty set.
    pub fn from_samples(samples: &[u64]) -> Option<LatencyStats> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted: Vec<u64> = samples.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let sum: u128 = sorted.iter().map(|&v| v as u128).sum();
        let pick = |q_num: usize, q_den: usize| -> u64 {
            // Nearest-rank percentile: ceil(q * n), 1-indexed.
            let rank = (n * q_num).div_ceil(q_den).max(1);
            sorted[rank - 1]
        };
        Some(LatencyStats {
            count: n as u64,
            mean_us: (sum / n as u128) as u64,
            p50_us: pick(50, 100),
            p95_us: pick(95, 100),
            max_us: sorted[n - 1],
        })
    }
}

/// Bytes and message counts for traffic that crossed a node boundary.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub total_bytes: u64,
    pub messages: u64,
    /// Bytes per directed link, keyed "src->dst".
    pub by_link: BTreeMap<String, u64>,
    /// Bytes per message kind (PUBLISH, NOTIFY, ACTION, ...).
    pub by_type: BTreeMap<String, u64>,
}

impl TrafficStats {
    pub fn record(&mut self, src: &str, dst: &str, kind: &str, bytes: u64) {
        self.total_bytes += bytes;
        self.messages += 1;
        *self.by_link.entry(format!("{src}->{dst}")).or_insert(0) += bytes;
        *self.by_type.entry(kind.to_string()).or_insert(0) += bytes;
    }
}

/// Final report for a simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub duration_s: u64,
    pub traffic: TrafficStats,
    pub publishes: u64,
    pub notifications: u64,
    pub dropped_notifications: u64,
    pub tasks_launched: u64,
    pub tasks_terminated: u64,
    pub tasks_rejected: u64,
    pub migrations_completed: u64,
    pub service_latency: Option<LatencyStats>,
    pub startup_latency: Option<LatencyStats>,
    pub migration_latency: Option<LatencyStats>,
    /// Order-insensitive digest of final result-entity values across brokers.
    pub result_fingerprint: String,
    /// Wall-clock orchestration decision times. Only present when explicitly
    /// measured; excluded otherwise so reports stay reproducible byte for
    /// byte.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decision_latency: Option<LatencyStats>,
}

/// Accumulates raw observations during a run; folded into a report at the end.
#[derive(Default)]
pub struct MetricsCollector {
    pub traffic: TrafficStats,
    pub publishes: u64,
    pub notifications: u64,
    pub dropped_notifications: u64,
    pub tasks_launched: u64,
    pub tasks_terminated: u64,
    pub tasks_rejected: u64,
    service_first: BTreeMap<String, u64>,
    startup_samples: Vec<u64>,
    migration_samples: Vec<u64>,
}

impl MetricsCollector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the end-to-end latency for a trace. A trace can complete more
    /// than once (duplicate delivery during a migration window); only the
    /// earliest completion counts.
    pub fn record_service(&mut self, trace: &str, latency_us: u64) {
        self.service_first
            .entry(trace.to_string())
            .and_modify(|v| *v = (*v).min(latency_us))
            .or_insert(latency_us);
    }

    pub fn record_startup(&mut self, latency_us: u64) {
        self.startup_samples.push(latency_us);
    }

    pub fn record_migration(&mut self, latency_us: u64) {
        self.migration_samples.push(latency_us);
    }

    pub fn migration_samples(&self) -> &[u64] {
        &self.migration_samples
    }

    pub fn service_sample_count(&self) -> usize {
        self.service_first.len()
    }

    pub fn report(
        &self,
        mode: &str,
        seed: u64,
        duration_s: u64,
        result_fingerprint: String,
    ) -> MetricsReport {
        let service: Vec<u64> = self.service_first.values().copied().collect();
        MetricsReport {
            mode: mode.to_string(),
            seed,
            duration_s,
            traffic: self.traffic.clone(),
            publishes: self.publishes,
            notifications: self.notifications,
            dropped_notifications: self.dropped_notifications,
            tasks_launched: self.tasks_launched,
            tasks_terminated: self.tasks_terminated,
            tasks_rejected: self.tasks_rejected,
            migrations_completed: self.migration_samples.len() as u64,
            service_latency: LatencyStats::from_samples(&service),
            startup_latency: LatencyStats::from_samples(&self.startup_samples),
            migration_latency: LatencyStats::from_samples(&self.migration_samples),
            result_fingerprint,
            decision_latency: None,
        }
    }
}

/// 64-bit FNV-1a over sorted lines; used to digest result sets compactly.
pub fn fingerprint_lines(mut lines: Vec<String>) -> String {
    lines.sort();
    let mut hash: u64 = 0xcbf29ce484222325;
    for line in &lines {
        for &b in line.as_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash ^= b'\n' as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

/// Microseconds between two instants, saturating at zero.
pub fn elapsed_us(from: LogicalTime, to: LogicalTime) -> u64 {
    to.saturating_sub(from)
}
