//! Discrete-event replay of a workload against one system configuration.
//!
//! `workers` agents take trace events in order. A worker that frees up at
//! `t` dispatches the next event at `max(t, arrival)`, thinks for
//! `agent_think_ms`, then issues the tool call. The cache stages cost
//! `retrieval_ms` plus `judge_ms` per judge call (modeled on the virtual
//! clock, measured on the real one). Misses contend for the endpoint's
//! sliding-window quota; each permit request is its own event, so the limiter
//! only ever sees non-decreasing times. Latency runs from dispatch to
//! completion and decomposes exactly into agent, cache, judge and remote
//! time.
//!
//! The whole trace is one agent session for the prefetcher.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::cache::{EngineOptions, EvictionPolicy, LookupMode, SemanticCache};
use crate::clock::{Timestamp, VirtualClock};
use crate::embed::{Embedder, HashedBowEmbedder};
use crate::judge::{Judge, ReferenceJudge};
use crate::model::{CacheConfig, EmbeddingVector, SemanticKey};
use crate::prefetch::{admit_prefetched, PrefetchTicket, Prefetcher, DEFAULT_MAX_IN_FLIGHT};
use crate::proxy::Source;
use crate::remote::{
    Attempt, FetchRecord, LedgerTotals, Priority, RemoteService, RemoteToolClient, ServiceReply, SimulatedService,
    ToolEndpointConfig, NOT_FOUND,
};

use super::report::{percentile, MetricsReport, StageMeans};
use super::{BenchError, Workload};

/// Similarity gate used with the reference embedder and judge.
pub const REFERENCE_TAU_SIM: f64 = 0.7;

const SESSION: &str = "replay";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SystemMode {
    /// No cache.
    Vanilla,
    /// Literal key equality.
    Exact,
    /// Similarity gate only.
    AnnOnly,
    /// Similarity gate and judge.
    Full,
}

impl SystemMode {
    pub const ALL: [SystemMode; 4] = [SystemMode::Vanilla, SystemMode::Exact, SystemMode::AnnOnly, SystemMode::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemMode::Vanilla => "vanilla",
            SystemMode::Exact => "exact",
            SystemMode::AnnOnly => "ann_only",
            SystemMode::Full => "full",
        }
    }

    fn lookup_mode(self) -> Option<LookupMode> {
        match self {
            SystemMode::Vanilla => None,
            SystemMode::Exact => Some(LookupMode::Exact),
            SystemMode::AnnOnly => Some(LookupMode::AnnOnly),
            SystemMode::Full => Some(LookupMode::Full),
        }
    }
}

impl std::str::FromStr for SystemMode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        SystemMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| BenchError::Param(format!("unknown system `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClockMode {
    /// Simulated time; runs as fast as the host allows.
    #[default]
    Virtual,
    /// Events are paced against the wall clock and cache stages are timed.
    Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayConfig {
    pub mode: SystemMode,
    pub workers: usize,
    pub agent_think_ms: f64,
    /// Modeled cost of one cache lookup.
    pub retrieval_ms: f64,
    /// Modeled cost of one judge call.
    pub judge_ms: f64,
    pub cache: CacheConfig,
    /// When set, overrides `cache.capacity_tokens` with this fraction of the
    /// workload's working set.
    pub cache_ratio: Option<f64>,
    pub policy: EvictionPolicy,
    /// Endpoint for tools without an entry in `endpoints`.
    pub endpoint: ToolEndpointConfig,
    pub endpoints: Vec<ToolEndpointConfig>,
    pub jitter_seed: u64,
    pub prefetch: bool,
    /// Admit one element per ground-truth key before the first event.
    pub prewarm: bool,
    pub clock: ClockMode,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            mode: SystemMode::Full,
            workers: 8,
            agent_think_ms: 600.0,
            retrieval_ms: 20.0,
            judge_ms: 30.0,
            cache: CacheConfig {
                tau_sim: REFERENCE_TAU_SIM,
                ..CacheConfig::default()
            },
            cache_ratio: None,
            policy: EvictionPolicy::Lcfu,
            endpoint: ToolEndpointConfig {
                base_latency_ms: 400.0,
                ..ToolEndpointConfig::default()
            },
            endpoints: Vec::new(),
            jitter_seed: 1,
            prefetch: true,
            prewarm: false,
            clock: ClockMode::Virtual,
        }
    }
}

/// Per-request outcome of a replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub index: usize,
    pub dispatch: Timestamp,
    pub complete: Timestamp,
    /// `None` when the fetch gave up.
    pub source: Option<Source>,
    pub correct: bool,
    pub cache_ms: f64,
    pub judge_ms: f64,
    pub remote_ms: f64,
    pub retries: u32,
}

impl RequestRecord {
    pub fn latency_ms(&self) -> f64 {
        self.complete.millis_since(self.dispatch)
    }
}

pub struct ReplayRun {
    pub report: MetricsReport,
    pub requests: Vec<RequestRecord>,
    pub cache: Arc<SemanticCache>,
}

#[derive(Debug)]
enum Event {
    WorkerFree(usize),
    AgentDone(usize),
    FetchAttempt(usize, u32),
    FetchDone(usize),
    Complete(usize),
    PrefetchDone(PrefetchTicket, ServiceReply, Timestamp),
}

struct Scheduled {
    at: Timestamp,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    /// Reversed so that `BinaryHeap` pops the earliest event first.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Default)]
struct Agenda {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
}

impl Agenda {
    fn push(&mut self, at: Timestamp, event: Event) {
        self.seq += 1;
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }
}

struct Endpoint {
    client: RemoteToolClient,
    service: Arc<SimulatedService>,
}

#[derive(Default)]
struct ReqState {
    worker: usize,
    dispatch: Timestamp,
    cache_ms: f64,
    judge_ms: f64,
    fetch_started: Timestamp,
    remote_ms: f64,
    embedding: Option<EmbeddingVector>,
    reply: Option<ServiceReply>,
    value: Option<String>,
    source: Option<Source>,
    retries: u32,
    waiting: bool,
    complete: Timestamp,
}

/// Replays `workload` with the reference embedder and judge.
pub fn replay(workload: &Workload, config: &ReplayConfig) -> Result<ReplayRun, BenchError> {
    replay_with(
        workload,
        config,
        Arc::new(HashedBowEmbedder::default()),
        Arc::new(ReferenceJudge),
    )
}

pub fn replay_with(
    workload: &Workload,
    config: &ReplayConfig,
    embedder: Arc<dyn Embedder>,
    judge: Arc<dyn Judge>,
) -> Result<ReplayRun, BenchError> {
    workload.validate()?;
    if config.workers == 0 {
        return Err(BenchError::Param("workers must be positive".into()));
    }
    let mut cache_config = config.cache.clone();
    if let Some(ratio) = config.cache_ratio {
        if !(ratio > 0.0) {
            return Err(BenchError::Param("cache ratio must be positive".into()));
        }
        cache_config.capacity_tokens = workload.capacity_for_ratio(ratio).max(1);
    }
    let options = EngineOptions {
        policy: config.policy,
        ..EngineOptions::default()
    };
    let cache = Arc::new(SemanticCache::with_options(cache_config, embedder, judge, options)?);
    let clock = Arc::new(VirtualClock::default());
    let resolver = workload.resolver();
    let mut endpoints: HashMap<String, Endpoint> = HashMap::new();
    for (i, e) in workload.events.iter().enumerate() {
        if endpoints.contains_key(&e.tool) {
            continue;
        }
        let cfg = config
            .endpoints
            .iter()
            .find(|c| c.name == e.tool)
            .cloned()
            .unwrap_or_else(|| ToolEndpointConfig {
                name: e.tool.clone(),
                ..config.endpoint.clone()
            });
        let service = Arc::new(
            SimulatedService::new(
                workload.table.clone(),
                cfg.base_latency_ms,
                cfg.latency_jitter_ms,
                config.jitter_seed.wrapping_add(i as u64),
            )
            .with_resolver(resolver.clone()),
        );
        let client = RemoteToolClient::new(cfg, service.clone(), clock.clone())?;
        endpoints.insert(e.tool.clone(), Endpoint { client, service });
    }
    let keys: Vec<SemanticKey> = workload
        .events
        .iter()
        .map(|e| SemanticKey::new(e.tool.clone(), e.query_text.clone()))
        .collect::<Result<_, _>>()?;
    if config.prewarm && config.mode != SystemMode::Vanilla {
        let mut seen = std::collections::HashSet::new();
        for (e, key) in workload.events.iter().zip(&keys) {
            if seen.insert(&e.ground_truth_key) {
                let ep = &endpoints[&e.tool].client;
                let element = cache.element_for(
                    key.clone(),
                    &workload.table[&e.ground_truth_key],
                    ep.config().base_latency_ms,
                    ep.config().cost_per_call_usd,
                    Timestamp::ZERO,
                    None,
                )?;
                cache.admit(element, Timestamp::ZERO)?;
            }
        }
    }

    let prefetcher = Prefetcher::new(cache.config().prefetch_theta, DEFAULT_MAX_IN_FLIGHT);
    let lookup_mode = config.mode.lookup_mode();
    let n = workload.events.len();
    let mut reqs: Vec<ReqState> = (0..n).map(|_| ReqState::default()).collect();
    let mut agenda = Agenda::default();
    for w in 0..config.workers {
        agenda.push(Timestamp::ZERO, Event::WorkerFree(w));
    }
    let mut next = 0usize;
    let mut prefetches = 0u64;
    let wall_start = Instant::now();
    let real = config.clock == ClockMode::Real;

    while let Some(Scheduled { at: now, event, .. }) = agenda.heap.pop() {
        clock.set(now);
        if real {
            let target = Duration::from_micros(now.as_micros().max(0) as u64);
            if let Some(wait) = target.checked_sub(wall_start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        match event {
            Event::WorkerFree(w) => {
                if next < n {
                    let i = next;
                    next += 1;
                    let dispatch = now.max(workload.events[i].arrival);
                    reqs[i].worker = w;
                    reqs[i].dispatch = dispatch;
                    agenda.push(dispatch.plus_millis(config.agent_think_ms), Event::AgentDone(i));
                }
            }
            Event::AgentDone(i) => {
                let Some(mode) = lookup_mode else {
                    reqs[i].fetch_started = now;
                    agenda.push(now, Event::FetchAttempt(i, 0));
                    continue;
                };
                let outcome = cache.lookup(&keys[i], now, mode, false);
                let r = &mut reqs[i];
                if real {
                    r.cache_ms = outcome.timings.embed_ms + outcome.timings.index_ms;
                    r.judge_ms = outcome.timings.judge_ms;
                } else {
                    r.cache_ms = config.retrieval_ms;
                    r.judge_ms = config.judge_ms * outcome.judge_calls as f64;
                }
                let done = now.plus_millis(r.cache_ms + r.judge_ms);
                if let (true, Some(v)) = (outcome.is_hit(), outcome.value) {
                    r.value = Some(v);
                    r.source = Some(Source::Cache);
                    agenda.push(done, Event::Complete(i));
                } else {
                    r.embedding = outcome.embedding;
                    r.fetch_started = done;
                    agenda.push(done, Event::FetchAttempt(i, 0));
                }
            }
            Event::FetchAttempt(i, attempt) => {
                let ep = &endpoints[&workload.events[i].tool];
                let r = &mut reqs[i];
                match ep.client.attempt(now, Priority::User, attempt) {
                    Attempt::Granted => {
                        if std::mem::take(&mut r.waiting) {
                            ep.client.end_user_wait();
                        }
                        let reply = ep.service.call(&keys[i])?;
                        agenda.push(now.plus_millis(reply.latency_ms), Event::FetchDone(i));
                        r.reply = Some(reply);
                    }
                    Attempt::Throttled { retry_at } => {
                        if !r.waiting {
                            r.waiting = true;
                            ep.client.begin_user_wait();
                        }
                        r.retries += 1;
                        agenda.push(retry_at, Event::FetchAttempt(i, attempt + 1));
                    }
                    Attempt::GiveUp => {
                        if std::mem::take(&mut r.waiting) {
                            ep.client.end_user_wait();
                        }
                        r.remote_ms = now.millis_since(r.fetch_started);
                        agenda.push(now, Event::Complete(i));
                    }
                }
            }
            Event::FetchDone(i) => {
                let ep = &endpoints[&workload.events[i].tool];
                let r = &mut reqs[i];
                let reply = r.reply.take().expect("fetch in flight");
                let found = reply.result.is_some();
                let cost = ep.client.settle(found);
                r.remote_ms = now.millis_since(r.fetch_started);
                let value = reply.result.unwrap_or_else(|| NOT_FOUND.to_string());
                if found && lookup_mode.is_some() {
                    let element =
                        cache.element_for(keys[i].clone(), &value, r.remote_ms, cost, now, r.embedding.take())?;
                    if let Err(e) = cache.admit(element, now) {
                        tracing::debug!(error = %e, "fetched result not cached");
                    }
                }
                r.value = Some(value);
                r.source = Some(Source::Remote);
                agenda.push(now, Event::Complete(i));
            }
            Event::Complete(i) => {
                reqs[i].complete = now;
                agenda.push(now, Event::WorkerFree(reqs[i].worker));
                let Some(mode) = lookup_mode else { continue };
                let hit = reqs[i].source == Some(Source::Cache);
                prefetcher.record(SESSION, keys[i].text(), hit);
                if !config.prefetch {
                    continue;
                }
                for ticket in prefetcher.plan(&keys[i], &cache, now, mode) {
                    let ep = &endpoints[ticket.key.tool()];
                    if ep.client.attempt(now, Priority::Prefetch, 0) == Attempt::Granted {
                        let reply = ep.service.call(&ticket.key)?;
                        prefetches += 1;
                        agenda.push(now.plus_millis(reply.latency_ms), Event::PrefetchDone(ticket, reply, now));
                    } else {
                        prefetcher.finish(ticket);
                    }
                }
            }
            Event::PrefetchDone(ticket, reply, started) => {
                let ep = &endpoints[ticket.key.tool()];
                let found = reply.result.is_some();
                let cost_usd = ep.client.settle(found);
                let record = FetchRecord {
                    query: ticket.key.clone(),
                    result: reply.result.unwrap_or_else(|| NOT_FOUND.to_string()),
                    latency_ms: now.millis_since(started),
                    cost_usd,
                    retries: 0,
                    throttled: false,
                    found,
                };
                if let Err(e) = admit_prefetched(&cache, &record, now) {
                    tracing::debug!(error = %e, "prefetched result not cached");
                }
                prefetcher.finish(ticket);
            }
        }
    }

    let requests: Vec<RequestRecord> = reqs
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let expected = &workload.table[&workload.events[index].ground_truth_key];
            RequestRecord {
                index,
                dispatch: r.dispatch,
                complete: r.complete,
                source: r.source,
                correct: r.value.as_deref() == Some(expected.as_str()),
                cache_ms: r.cache_ms,
                judge_ms: r.judge_ms,
                remote_ms: r.remote_ms,
                retries: r.retries,
            }
        })
        .collect();
    let ledger = endpoints.values().fold(LedgerTotals::default(), |acc, ep| {
        let t = ep.client.ledger().totals();
        LedgerTotals {
            api_cost_micros: acc.api_cost_micros + t.api_cost_micros,
            call_count: acc.call_count + t.call_count,
            not_found_count: acc.not_found_count + t.not_found_count,
            retry_count: acc.retry_count + t.retry_count,
            throttle_events: acc.throttle_events + t.throttle_events,
        }
    });
    let report = summarize(config, &requests, ledger, prefetches, cache.stats().evictions);
    Ok(ReplayRun {
        report,
        requests,
        cache,
    })
}

fn summarize(
    config: &ReplayConfig,
    requests: &[RequestRecord],
    ledger: LedgerTotals,
    prefetches: u64,
    evictions: u64,
) -> MetricsReport {
    let n = requests.len() as u64;
    let nf = requests.len().max(1) as f64;
    let hits = requests.iter().filter(|r| r.source == Some(Source::Cache)).count() as u64;
    let errors = requests.iter().filter(|r| r.source.is_none()).count() as u64;
    let mut latencies: Vec<f64> = requests.iter().map(RequestRecord::latency_ms).collect();
    latencies.sort_by(f64::total_cmp);
    let start = requests.iter().map(|r| r.dispatch).min().unwrap_or(Timestamp::ZERO);
    let end = requests.iter().map(|r| r.complete).max().unwrap_or(Timestamp::ZERO);
    let makespan_s = end.secs_since(start);
    let mean = |f: fn(&RequestRecord) -> f64| requests.iter().map(f).sum::<f64>() / nf;
    let api_calls = ledger.api_calls();
    MetricsReport {
        mode: config.mode.as_str().to_string(),
        requests: n,
        hits,
        misses: n - hits,
        errors,
        hit_rate: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        throughput_rps: if makespan_s > 0.0 { n as f64 / makespan_s } else { 0.0 },
        latency_mean_ms: latencies.iter().sum::<f64>() / nf,
        latency_p50_ms: percentile(&latencies, 50.0),
        latency_p99_ms: percentile(&latencies, 99.0),
        api_calls,
        billed_calls: ledger.call_count,
        not_found_calls: ledger.not_found_count,
        retries: ledger.retry_count,
        throttle_events: ledger.throttle_events,
        retry_ratio: if api_calls == 0 {
            0.0
        } else {
            ledger.retry_count as f64 / api_calls as f64
        },
        api_cost_micros: ledger.api_cost_micros,
        api_cost_usd: ledger.api_cost_usd(),
        cost_per_request_usd: ledger.api_cost_usd() / nf,
        accuracy: requests.iter().filter(|r| r.correct).count() as f64 / nf,
        prefetches,
        evictions,
        makespan_s,
        stages: StageMeans {
            agent_ms: if n == 0 { 0.0 } else { config.agent_think_ms },
            cache_retrieval_ms: mean(|r| r.cache_ms),
            judge_ms: mean(|r| r.judge_ms),
            remote_ms: mean(|r| r.remote_ms),
        },
    }
}
