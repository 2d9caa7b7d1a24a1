//! Replay metrics and their text forms.

use crate::kv::{KvError, Record};

/// Mean time per request spent in each stage, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageMeans {
    pub agent_ms: f64,
    pub cache_retrieval_ms: f64,
    pub judge_ms: f64,
    pub remote_ms: f64,
}

impl StageMeans {
    pub fn total_ms(&self) -> f64 {
        self.agent_ms + self.cache_retrieval_ms + self.judge_ms + self.remote_ms
    }

    /// Cache retrieval plus judge validation.
    pub fn cache_stages_ms(&self) -> f64 {
        self.cache_retrieval_ms + self.judge_ms
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub mode: String,
    pub requests: u64,
    pub hits: u64,
    /// Every non-hit, failed requests included.
    pub misses: u64,
    pub errors: u64,
    pub hit_rate: f64,
    pub throughput_rps: f64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    /// Requests that reached the remote side, throttled ones included.
    pub api_calls: u64,
    pub billed_calls: u64,
    pub not_found_calls: u64,
    pub retries: u64,
    pub throttle_events: u64,
    pub retry_ratio: f64,
    pub api_cost_micros: u64,
    pub api_cost_usd: f64,
    pub cost_per_request_usd: f64,
    /// Fraction of served values equal to the event's ground-truth answer.
    pub accuracy: f64,
    pub prefetches: u64,
    pub evictions: u64,
    pub makespan_s: f64,
    pub stages: StageMeans,
}

const FIELDS: &[&str] = &[
    "mode",
    "requests",
    "hits",
    "misses",
    "errors",
    "hit_rate",
    "throughput_rps",
    "latency_mean_ms",
    "latency_p50_ms",
    "latency_p99_ms",
    "api_calls",
    "billed_calls",
    "not_found_calls",
    "retries",
    "throttle_events",
    "retry_ratio",
    "api_cost_micros",
    "api_cost_usd",
    "cost_per_request_usd",
    "accuracy",
    "prefetches",
    "evictions",
    "makespan_s",
    "stage_agent_ms",
    "stage_cache_retrieval_ms",
    "stage_judge_ms",
    "stage_remote_ms",
];

impl MetricsReport {
    fn values(&self) -> Vec<String> {
        vec![
            self.mode.clone(),
            self.requests.to_string(),
            self.hits.to_string(),
            self.misses.to_string(),
            self.errors.to_string(),
            self.hit_rate.to_string(),
            self.throughput_rps.to_string(),
            self.latency_mean_ms.to_string(),
            self.latency_p50_ms.to_string(),
            self.latency_p99_ms.to_string(),
            self.api_calls.to_string(),
            self.billed_calls.to_string(),
            self.not_found_calls.to_string(),
            self.retries.to_string(),
            self.throttle_events.to_string(),
            self.retry_ratio.to_string(),
            self.api_cost_micros.to_string(),
            self.api_cost_usd.to_string(),
            self.cost_per_request_usd.to_string(),
            self.accuracy.to_string(),
            self.prefetches.to_string(),
            self.evictions.to_string(),
            self.makespan_s.to_string(),
            self.stages.agent_ms.to_string(),
            self.stages.cache_retrieval_ms.to_string(),
            self.stages.judge_ms.to_string(),
            self.stages.remote_ms.to_string(),
        ]
    }

    /// Key-value block, one field per line.
    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        for (k, v) in FIELDS.iter().zip(self.values()) {
            r.push(k, v);
        }
        r
    }

    pub fn from_record(r: &Record) -> Result<Self, KvError> {
        Ok(MetricsReport {
            mode: r.require("mode")?.to_string(),
            requests: r.parse_field("requests")?,
            hits: r.parse_field("hits")?,
            misses: r.parse_field("misses")?,
            errors: r.parse_field("errors")?,
            hit_rate: r.parse_field("hit_rate")?,
            throughput_rps: r.parse_field("throughput_rps")?,
            latency_mean_ms: r.parse_field("latency_mean_ms")?,
            latency_p50_ms: r.parse_field("latency_p50_ms")?,
            latency_p99_ms: r.parse_field("latency_p99_ms")?,
            api_calls: r.parse_field("api_calls")?,
            billed_calls: r.parse_field("billed_calls")?,
            not_found_calls: r.parse_field("not_found_calls")?,
            retries: r.parse_field("retries")?,
            throttle_events: r.parse_field("throttle_events")?,
            retry_ratio: r.parse_field("retry_ratio")?,
            api_cost_micros: r.parse_field("api_cost_micros")?,
            api_cost_usd: r.parse_field("api_cost_usd")?,
            cost_per_request_usd: r.parse_field("cost_per_request_usd")?,
            accuracy: r.parse_field("accuracy")?,
            prefetches: r.parse_field("prefetches")?,
            evictions: r.parse_field("evictions")?,
            makespan_s: r.parse_field("makespan_s")?,
            stages: StageMeans {
                agent_ms: r.parse_field("stage_agent_ms")?,
                cache_retrieval_ms: r.parse_field("stage_cache_retrieval_ms")?,
                judge_ms: r.parse_field("stage_judge_ms")?,
                remote_ms: r.parse_field("stage_remote_ms")?,
            },
        })
    }

    /// Tab-separated column names for [`Self::table_row`].
    pub fn table_header() -> String {
        FIELDS.join("\t")
    }

    pub fn table_row(&self) -> String {
        self.values().join("\t")
    }
}

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-stage mean latency of a replay.
pub fn latency_breakdown(report: &MetricsReport) -> StageMeans {
    report.stages
}

/// Expected per-request latency for hit probability `p_hit`.
pub fn expected_latency(p_hit: f64, hit_latency: f64, miss_latency: f64) -> f64 {
    p_hit * hit_latency + (1.0 - p_hit) * miss_latency
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_latency_of_half_hits() {
        assert!((expected_latency(0.5, 0.65, 1.13) - 0.89).abs() < 1e-12);
        assert_eq!(expected_latency(1.0, 0.65, 1.13), 0.65);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn record_and_table_round_trip() {
        let r = MetricsReport {
            mode: "full".into(),
            requests: 10,
            hits: 7,
            misses: 3,
            hit_rate: 0.7,
            api_cost_micros: 15_000,
            api_cost_usd: 0.015,
            stages: StageMeans {
                agent_ms: 600.0,
                cache_retrieval_ms: 20.0,
                judge_ms: 30.0,
                remote_ms: 120.0,
            },
            ..MetricsReport::default()
        };
        let text = r.to_record().encode();
        assert_eq!(MetricsReport::from_record(&Record::decode(&text).unwrap()).unwrap(), r);
        assert_eq!(
            MetricsReport::table_header().split('\t').count(),
            r.table_row().split('\t').count()
        );
        assert_eq!(latency_breakdown(&r).total_ms(), 770.0);
    }
}
