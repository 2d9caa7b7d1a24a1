//! Workload generation, trace files and replay benchmarks.
//!
//! A [`Workload`] is a trace of timed tool calls plus the ground-truth table
//! that the simulated remote service answers from. Every event names the
//! table key its answer must match, which is how replay measures accuracy.

mod corpus;
mod generate;
mod replay;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use thiserror::Error;

use crate::cache::CacheError;
use crate::clock::Timestamp;
use crate::kv;
use crate::model::{token_count, ModelError};
use crate::remote::{format_table, parse_table, FetchError};

pub use corpus::{answer_text, frames, pseudo_words, render, AnswerFlavor, Frame};
pub use generate::{
    envelope_mass, gen_mixed_cost, gen_periodic_trace, gen_repo_trace, gen_trend, gen_trend_trace, gen_zipf,
    gen_zipf_trace, mixed_cost_endpoints, repo_file_frequencies, zipf_weights, MixedCostParams, TrendParams,
    TrendTopic, ZipfParams, EPHEMERAL_TOOL, STATIC_TOOL,
};
pub use replay::{replay, replay_with, ClockMode, ReplayConfig, ReplayRun, RequestRecord, SystemMode, REFERENCE_TAU_SIM};
pub use report::{expected_latency, latency_breakdown, percentile, MetricsReport, StageMeans};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("trace line {line}: {reason}")]
    Trace { line: usize, reason: String },
    #[error("event {index}: ground-truth key `{key}` is not in the table")]
    MissingKey { index: usize, key: String },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub arrival: Timestamp,
    pub tool: String,
    pub cluster_id: u64,
    /// Key of the canonical answer in the ground-truth table.
    pub ground_truth_key: String,
    pub query_text: String,
}

/// One `arrival_secs<TAB>tool<TAB>cluster<TAB>key<TAB>query` line per event.
/// Text fields are escaped as in [`crate::kv`].
pub fn format_trace(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&format!(
            "{:.6}\t{}\t{}\t{}\t{}\n",
            e.arrival.as_secs_f64(),
            kv::escape(&e.tool),
            e.cluster_id,
            kv::escape(&e.ground_truth_key),
            kv::escape(&e.query_text)
        ));
    }
    out
}

/// Inverse of [`format_trace`]. Blank lines and `#` comments are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, BenchError> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| BenchError::Trace {
            line: i + 1,
            reason: reason.into(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [arrival, tool, cluster, key, query] = fields[..] else {
            return Err(err("expected five tab-separated fields"));
        };
        let arrival: f64 = arrival.parse().map_err(|_| err("arrival is not a number"))?;
        if !(arrival >= 0.0 && arrival.is_finite()) {
            return Err(err("arrival must be a non-negative number of seconds"));
        }
        let text = |f: &str, what: &str| kv::unescape(f).ok_or_else(|| err(&format!("bad escape in {what}")));
        let event = TraceEvent {
            arrival: Timestamp::from_secs_f64(arrival),
            tool: text(tool, "tool")?,
            cluster_id: cluster.parse().map_err(|_| err("cluster id is not an integer"))?,
            ground_truth_key: text(key, "ground-truth key")?,
            query_text: text(query, "query")?,
        };
        if event.query_text.trim().is_empty() || event.tool.is_empty() {
            return Err(err("empty tool or query"));
        }
        events.push(event);
    }
    Ok(events)
}

pub const TRACE_FILE: &str = "trace.tsv";
pub const TABLE_FILE: &str = "table.tsv";

/// A trace and the table its ground-truth keys refer to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Workload {
    pub events: Vec<TraceEvent>,
    pub table: HashMap<String, String>,
}

impl Workload {
    /// Every event's key must be in the table and every answer non-empty.
    pub fn validate(&self) -> Result<(), BenchError> {
        for (index, e) in self.events.iter().enumerate() {
            match self.table.get(&e.ground_truth_key) {
                Some(v) if !v.trim().is_empty() => {}
                _ => {
                    return Err(BenchError::MissingKey {
                        index,
                        key: e.ground_truth_key.clone(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Query text → ground-truth key, for the simulated service's resolver.
    pub fn resolver(&self) -> HashMap<String, String> {
        self.events
            .iter()
            .map(|e| (e.query_text.clone(), e.ground_truth_key.clone()))
            .collect()
    }

    /// Tokens a per-request cache needs to hold the answer of every distinct
    /// query text in the trace. This is the denominator of the cache ratio.
    pub fn working_set_tokens(&self) -> u64 {
        let mut distinct: BTreeMap<(&str, &str), &str> = BTreeMap::new();
        for e in &self.events {
            distinct.insert((&e.tool, &e.query_text), &e.ground_truth_key);
        }
        distinct
            .values()
            .filter_map(|k| self.table.get(*k))
            .map(|v| token_count(v).unwrap_or(0))
            .sum()
    }

    /// Capacity in tokens for a given cache ratio.
    pub fn capacity_for_ratio(&self, ratio: f64) -> u64 {
        (ratio * self.working_set_tokens() as f64).round() as u64
    }

    /// Writes `trace.tsv` and `table.tsv` into `dir`, creating it.
    pub fn save(&self, dir: &Path) -> Result<(), BenchError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| BenchError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let trace = dir.join(TRACE_FILE);
        std::fs::write(&trace, format_trace(&self.events)).map_err(io(&trace))?;
        let table = dir.join(TABLE_FILE);
        std::fs::write(&table, format_table(&self.table)).map_err(io(&table))?;
        Ok(())
    }

    /// Inverse of [`Self::save`]; validates the result.
    pub fn load(dir: &Path) -> Result<Self, BenchError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| BenchError::Io { path, source })
        };
        let w = Workload {
            events: parse_trace(&read(TRACE_FILE)?)?,
            table: parse_table(&read(TABLE_FILE)?)?,
        };
        w.validate()?;
        Ok(w)
    }

    /// Event counts per cluster id.
    pub fn cluster_counts(&self) -> BTreeMap<u64, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.events {
            *counts.entry(e.cluster_id).or_default() += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn event(t: f64, q: &str) -> TraceEvent {
        TraceEvent {
            arrival: Timestamp::from_secs_f64(t),
            tool: "search".into(),
            cluster_id: 3,
            ground_truth_key: "k\t3".into(),
            query_text: q.into(),
        }
    }

    #[test]
    fn trace_round_trips() {
        let events = vec![event(0.0, "who painted the mona lisa"), event(1.25, "tab\there, newline\nthere")];
        let text = format_trace(&events);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_trace(&text).unwrap(), events);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(matches!(parse_trace("1.0\tsearch\t1\tk"), Err(BenchError::Trace { line: 1, .. })));
        assert!(parse_trace("x\tsearch\t1\tk\tq").is_err());
        assert!(parse_trace("-1\tsearch\t1\tk\tq").is_err());
        assert!(parse_trace("# comment\n\n0\tsearch\t1\tk\tq\n").unwrap().len() == 1);
    }

    #[test]
    fn validate_reports_missing_keys() {
        let w = Workload {
            events: vec![event(0.0, "q")],
            table: HashMap::new(),
        };
        assert!(matches!(w.validate(), Err(BenchError::MissingKey { index: 0, .. })));
    }

    #[test]
    fn workload_dir_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let w = Workload {
            events: vec![event(0.0, "a"), event(1.5, "b")],
            table: HashMap::from([("k\t3".to_string(), "one\ntwo".to_string())]),
        };
        w.save(&dir.path().join("w")).unwrap();
        assert_eq!(Workload::load(&dir.path().join("w")).unwrap(), w);
        assert!(matches!(Workload::load(dir.path()), Err(BenchError::Io { .. })));
    }

    #[test]
    fn working_set_counts_each_distinct_text_once() {
        let mut w = Workload {
            events: vec![event(0.0, "a"), event(1.0, "a"), event(2.0, "b")],
            table: HashMap::from([("k\t3".to_string(), "one two three".to_string())]),
        };
        assert_eq!(w.working_set_tokens(), 6);
        assert_eq!(w.capacity_for_ratio(0.5), 3);
        w.events.push(event(3.0, "c"));
        assert_eq!(w.working_set_tokens(), 9);
    }
}
