//! Cache-aside proxy in front of remote tools.
//!
//! Agent output is scanned for tool tags such as `<search>…</search>`; each
//! call is looked up in the semantic cache and, on a miss, fetched from the
//! tool's endpoint, scored for staticity, admitted and returned. Every served
//! request updates the prefetcher and emits exactly one metrics event.

use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, EngineOptions, EvictionPolicy, LookupMode, LookupOutcome, SemanticCache};
use crate::clock::{Clock, Timestamp, WallClock};
use crate::embed::{EmbedError, Embedder, HashedBowEmbedder, RemoteEmbedder};
use crate::judge::{Judge, ReferenceJudge, RemoteJudge};
use crate::kv::Record;
use crate::model::{CacheConfig, ModelError, SemanticKey};
use crate::prefetch::{admit_prefetched, PrefetchTicket, Prefetcher};
use crate::recalibrate::{recalibrate, AnnotatedSample, GroundTruth, Recalibration, RecalibrationError};
use crate::remote::{
    parse_table, FetchError, FetchRecord, HttpService, LedgerTotals, Priority, RemoteService, RemoteToolClient,
    SimulatedService, ToolEndpointConfig,
};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Recalibration(#[from] RecalibrationError),
    #[error("no ground-truth source configured")]
    NoGroundTruth,
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub tool: String,
    pub query_text: String,
    /// Byte range of the whole tag pair in the agent output.
    pub raw_span: Range<usize>,
    /// Up to the configured number of characters preceding the tag.
    pub context: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    pub calls: Vec<ToolCall>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Extracts every well-formed `<tool>…</tool>` pair whose tag name is in
/// `vocabulary`, in document order. Other tags are ignored. An opening tag
/// without a matching close, or with only whitespace inside, is skipped and
/// reported.
pub fn parse_tool_calls(agent_output: &str, vocabulary: &[String], context_chars: usize) -> ParsedOutput {
    let mut out = ParsedOutput::default();
    let mut pos = 0;
    while let Some(rel) = agent_output[pos..].find('<') {
        let start = pos + rel;
        let after = &agent_output[start + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        let is_open = after[name_len..].starts_with('>');
        if name.is_empty() || !is_open || !vocabulary.iter().any(|v| v == name) {
            pos = start + 1;
            continue;
        }
        let body_start = start + name.len() + 2;
        let close = format!("</{name}>");
        match agent_output[body_start..].find(&close) {
            None => {
                out.diagnostics.push(Diagnostic {
                    offset: start,
                    message: format!("unclosed <{name}> tag"),
                });
                pos = body_start;
            }
            Some(rel_end) => {
                let body_end = body_start + rel_end;
                let end = body_end + close.len();
                let text = agent_output[body_start..body_end].trim();
                if text.is_empty() {
                    out.diagnostics.push(Diagnostic {
                        offset: start,
                        message: format!("empty <{name}> tag"),
                    });
                } else {
                    let context = (context_chars > 0).then(|| {
                        let before = &agent_output[..start];
                        let skip = before.chars().count().saturating_sub(context_chars);
                        before.chars().skip(skip).collect::<String>()
                    });
                    out.calls.push(ToolCall {
                        tool: name.to_string(),
                        query_text: text.to_string(),
                        raw_span: start..end,
                        context,
                    });
                }
                pos = end;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Cache,
    Remote,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Cache => "cache",
            Source::Remote => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeResult {
    pub value: String,
    pub source: Source,
    pub outcome: LookupOutcome,
    pub fetch: Option<FetchRecord>,
    pub prefetches: usize,
}

impl ServeResult {
    pub fn to_record(&self) -> Record {
        let mut r = Record::new()
            .with("source", self.source.as_str())
            .with("value", &self.value)
            .with("hit", self.outcome.is_hit())
            .with("candidates", self.outcome.candidates_considered)
            .with("judge_calls", self.outcome.judge_calls);
        if let Some(id) = self.outcome.element_id {
            r.push("element_id", id);
        }
        if let Some(s) = self.outcome.s_lsm {
            r.push("s_lsm", s);
        }
        if let Some(s) = self.outcome.similarity {
            r.push("similarity", s);
        }
        if let Some(f) = &self.fetch {
            r.push("remote_latency_ms", f.latency_ms)
                .push("retries", f.retries)
                .push("cost_usd", f.cost_usd)
                .push("found", f.found);
        }
        r
    }
}

/// Counters for served requests.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProxyMetrics {
    pub requests: u64,
    pub hits: u64,
    pub misses: u64,
    pub errors: u64,
    pub prefetches: u64,
    pub total_latency_ms: f64,
}

/// How prefetch fetches run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchExecution {
    /// On detached threads; the request does not wait.
    #[default]
    Background,
    /// Before `handle` returns; deterministic.
    Inline,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    #[default]
    Full,
    AnnOnly,
    Exact,
    /// Bypass the cache.
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyConfig {
    #[default]
    Lcfu,
    Lru,
    Lfu,
}

impl From<PolicyConfig> for EvictionPolicy {
    fn from(p: PolicyConfig) -> Self {
        match p {
            PolicyConfig::Lcfu => EvictionPolicy::Lcfu,
            PolicyConfig::Lru => EvictionPolicy::Lru,
            PolicyConfig::Lfu => EvictionPolicy::Lfu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// `reference` or `remote`.
    pub kind: String,
    pub dimension: usize,
    pub seed: u64,
    pub addr: Option<String>,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: "reference".into(),
            dimension: crate::embed::DEFAULT_DIMENSION,
            seed: 1,
            addr: None,
            timeout_ms: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    /// `reference` or `remote`.
    pub kind: String,
    pub addr: Option<String>,
    pub timeout_ms: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            kind: "reference".into(),
            addr: None,
            timeout_ms: 2000,
        }
    }
}

/// Where an endpoint's answers come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Ground-truth table for the simulated service.
    pub table: Option<PathBuf>,
    /// Trace file whose query texts map onto table keys.
    pub trace: Option<PathBuf>,
    pub jitter_seed: u64,
    /// Live HTTP adapter; takes precedence over the table.
    pub url_template: Option<String>,
    pub timeout_ms: Option<u64>,
    pub auth_header: Option<String>,
    pub auth_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointEntry {
    #[serde(flatten)]
    pub endpoint: ToolEndpointConfig,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub bind: String,
    pub port: u16,
    pub workers: usize,
    pub tools: Vec<String>,
    pub context_chars: usize,
    pub mode: ModeConfig,
    pub policy: PolicyConfig,
    pub prefetch: PrefetchExecution,
    pub prefetch_max_in_flight: usize,
    /// Ground-truth samples per minute for recalibration.
    pub recalibration_samples_per_minute: usize,
    pub snapshot_dir: PathBuf,
    pub cache: CacheConfig,
    pub embedder: EmbedderConfig,
    pub judge: JudgeConfig,
    pub endpoints: Vec<EndpointEntry>,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            workers: 8,
            tools: vec!["search".into(), "file_read".into()],
            context_chars: 0,
            mode: ModeConfig::Full,
            policy: PolicyConfig::Lcfu,
            prefetch: PrefetchExecution::Background,
            prefetch_max_in_flight: crate::prefetch::DEFAULT_MAX_IN_FLIGHT,
            recalibration_samples_per_minute: 5,
            snapshot_dir: PathBuf::from("semcache-snapshot"),
            cache: CacheConfig::default(),
            embedder: EmbedderConfig::default(),
            judge: JudgeConfig::default(),
            endpoints: Vec::new(),
        }
    }
}

impl ProxyConfig {
    pub fn from_toml(text: &str) -> Result<Self, ProxyError> {
        let config: ProxyConfig = toml::from_str(text).map_err(|e| ProxyError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ProxyError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProxyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ProxyError> {
        self.cache.validate()?;
        if self.workers == 0 {
            return Err(ProxyError::Config("workers must be positive".into()));
        }
        if self.tools.is_empty() {
            return Err(ProxyError::Config("tool vocabulary is empty".into()));
        }
        for e in &self.endpoints {
            e.endpoint.validate()?;
        }
        Ok(())
    }
}

/// Ground truth backed by a simulated service's table.
#[derive(Debug, Clone)]
pub struct ServiceGroundTruth(pub Arc<SimulatedService>);

impl GroundTruth for ServiceGroundTruth {
    fn fetch(&self, query: &str) -> Option<String> {
        self.0.answer(self.0.ground_truth_key(query)).map(str::to_string)
    }
}

/// Reads a trace file into a query-text → ground-truth-key map.
fn resolver_from_trace(path: &Path) -> Result<HashMap<String, String>, ProxyError> {
    let text = std::fs::read_to_string(path).map_err(|source| ProxyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let events = crate::bench::parse_trace(&text).map_err(|e| ProxyError::Config(e.to_string()))?;
    Ok(events.into_iter().map(|e| (e.query_text, e.ground_truth_key)).collect())
}

pub struct Proxy {
    cache: Arc<SemanticCache>,
    mode: ModeConfig,
    clients: HashMap<String, Arc<RemoteToolClient>>,
    prefetcher: Arc<Prefetcher>,
    prefetch: PrefetchExecution,
    tools: Vec<String>,
    context_chars: usize,
    clock: Arc<dyn Clock>,
    metrics: Mutex<ProxyMetrics>,
    ground_truth: Option<Arc<dyn GroundTruth + Send + Sync>>,
    validation: Mutex<Vec<AnnotatedSample>>,
    samples_per_minute: usize,
    last_recalibration: Mutex<Timestamp>,
    snapshot_dir: PathBuf,
}

impl std::fmt::Debug for Proxy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Proxy")
            .field("mode", &self.mode)
            .field("tools", &self.tools)
            .field("metrics", &self.metrics())
            .finish()
    }
}

impl Proxy {
    /// Assembles a proxy from parts. Endpoints are keyed by their `name`,
    /// which is the tool tag they serve.
    pub fn new(
        cache: Arc<SemanticCache>,
        clients: Vec<Arc<RemoteToolClient>>,
        clock: Arc<dyn Clock>,
        mode: ModeConfig,
    ) -> Self {
        let theta = cache.config().prefetch_theta;
        let tools: Vec<String> = clients.iter().map(|c| c.config().name.clone()).collect();
        Proxy {
            cache,
            mode,
            clients: clients.into_iter().map(|c| (c.config().name.clone(), c)).collect(),
            prefetcher: Arc::new(Prefetcher::new(theta, crate::prefetch::DEFAULT_MAX_IN_FLIGHT)),
            prefetch: PrefetchExecution::Inline,
            tools,
            context_chars: 0,
            clock,
            metrics: Mutex::new(ProxyMetrics::default()),
            ground_truth: None,
            validation: Mutex::new(Vec::new()),
            samples_per_minute: 5,
            last_recalibration: Mutex::new(Timestamp::ZERO),
            snapshot_dir: PathBuf::from("semcache-snapshot"),
        }
    }

    pub fn with_prefetch(mut self, execution: PrefetchExecution, max_in_flight: usize) -> Self {
        self.prefetch = execution;
        self.prefetcher = Arc::new(Prefetcher::new(self.cache.config().prefetch_theta, max_in_flight));
        self
    }

    pub fn with_ground_truth(mut self, gt: Arc<dyn GroundTruth + Send + Sync>) -> Self {
        self.ground_truth = Some(gt);
        self
    }

    pub fn with_tools(mut self, tools: Vec<String>, context_chars: usize) -> Self {
        self.tools = tools;
        self.context_chars = context_chars;
        self
    }

    pub fn with_snapshot_dir(mut self, dir: PathBuf) -> Self {
        self.snapshot_dir = dir;
        self
    }

    /// Builds the full stack described by `config` on the wall clock.
    pub fn from_config(config: &ProxyConfig) -> Result<Self, ProxyError> {
        config.validate()?;
        let timeout = |ms: u64| Duration::from_millis(ms);
        let parse_addr = |a: &Option<String>, what: &str| -> Result<std::net::SocketAddr, ProxyError> {
            a.as_deref()
                .ok_or_else(|| ProxyError::Config(format!("{what}.addr is required for a remote {what}")))?
                .parse()
                .map_err(|e| ProxyError::Config(format!("{what}.addr: {e}")))
        };
        let embedder: Arc<dyn Embedder> = match config.embedder.kind.as_str() {
            "reference" => Arc::new(HashedBowEmbedder::new(config.embedder.dimension, config.embedder.seed)?),
            "remote" => Arc::new(RemoteEmbedder::new(
                parse_addr(&config.embedder.addr, "embedder")?,
                config.embedder.dimension,
                config.embedder.seed,
                timeout(config.embedder.timeout_ms),
            )),
            other => return Err(ProxyError::Config(format!("unknown embedder kind `{other}`"))),
        };
        let judge: Arc<dyn Judge> = match config.judge.kind.as_str() {
            "reference" => Arc::new(ReferenceJudge),
            "remote" => Arc::new(RemoteJudge::new(
                parse_addr(&config.judge.addr, "judge")?,
                timeout(config.judge.timeout_ms),
            )),
            other => return Err(ProxyError::Config(format!("unknown judge kind `{other}`"))),
        };
        let options = EngineOptions {
            policy: config.policy.into(),
            ..EngineOptions::default()
        };
        let cache = Arc::new(SemanticCache::with_options(config.cache.clone(), embedder, judge, options)?);
        let clock: Arc<dyn Clock> = Arc::new(WallClock);
        let mut clients = Vec::new();
        let mut ground_truth: Option<Arc<dyn GroundTruth + Send + Sync>> = None;
        for entry in &config.endpoints {
            let b = &entry.backend;
            let service: Arc<dyn RemoteService> = if let Some(url) = &b.url_template {
                Arc::new(HttpService::new(
                    url.clone(),
                    timeout(b.timeout_ms.unwrap_or(10_000)),
                    b.auth_header.as_deref(),
                    b.auth_env.as_deref(),
                )?)
            } else {
                let table = match &b.table {
                    Some(p) => parse_table(&std::fs::read_to_string(p).map_err(|source| ProxyError::Io {
                        path: p.clone(),
                        source,
                    })?)?,
                    None => HashMap::new(),
                };
                let mut sim = SimulatedService::new(
                    table,
                    entry.endpoint.base_latency_ms,
                    entry.endpoint.latency_jitter_ms,
                    b.jitter_seed,
                );
                if let Some(trace) = &b.trace {
                    sim = sim.with_resolver(resolver_from_trace(trace)?);
                }
                let sim = Arc::new(sim);
                ground_truth.get_or_insert_with(|| Arc::new(ServiceGroundTruth(sim.clone())));
                sim
            };
            clients.push(Arc::new(RemoteToolClient::new(entry.endpoint.clone(), service, clock.clone())?));
        }
        let mut proxy = Proxy::new(cache, clients, clock, config.mode)
            .with_prefetch(config.prefetch, config.prefetch_max_in_flight)
            .with_tools(config.tools.clone(), config.context_chars)
            .with_snapshot_dir(config.snapshot_dir.clone());
        proxy.samples_per_minute = config.recalibration_samples_per_minute;
        proxy.ground_truth = ground_truth;
        *proxy.last_recalibration.lock() = proxy.clock.now();
        Ok(proxy)
    }

    pub fn cache(&self) -> &Arc<SemanticCache> {
        &self.cache
    }

    pub fn prefetcher(&self) -> &Arc<Prefetcher> {
        &self.prefetcher
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn tools(&self) -> &[String] {
        &self.tools
    }

    pub fn context_chars(&self) -> usize {
        self.context_chars
    }

    pub fn snapshot_dir(&self) -> &Path {
        &self.snapshot_dir
    }

    pub fn metrics(&self) -> ProxyMetrics {
        *self.metrics.lock()
    }

    /// Ledger totals summed over every endpoint.
    pub fn ledger(&self) -> LedgerTotals {
        self.clients.values().fold(LedgerTotals::default(), |acc, c| {
            let t = c.ledger().totals();
            LedgerTotals {
                api_cost_micros: acc.api_cost_micros + t.api_cost_micros,
                call_count: acc.call_count + t.call_count,
                not_found_count: acc.not_found_count + t.not_found_count,
                retry_count: acc.retry_count + t.retry_count,
                throttle_events: acc.throttle_events + t.throttle_events,
            }
        })
    }

    pub fn parse(&self, agent_output: &str) -> ParsedOutput {
        parse_tool_calls(agent_output, &self.tools, self.context_chars)
    }

    fn lookup_mode(&self) -> Option<LookupMode> {
        match self.mode {
            ModeConfig::Full => Some(LookupMode::Full),
            ModeConfig::AnnOnly => Some(LookupMode::AnnOnly),
            ModeConfig::Exact => Some(LookupMode::Exact),
            ModeConfig::Vanilla => None,
        }
    }

    /// Serves one tool call for `session`.
    pub fn handle(&self, call: &ToolCall, session: &str) -> Result<ServeResult, ProxyError> {
        let started = self.clock.now();
        let result = self.serve(call, session);
        let elapsed = self.clock.now().millis_since(started);
        let mut m = self.metrics.lock();
        m.requests += 1;
        m.total_latency_ms += elapsed;
        match &result {
            Ok(r) if r.source == Source::Cache => m.hits += 1,
            Ok(r) => {
                m.misses += 1;
                m.prefetches += r.prefetches as u64;
            }
            Err(_) => m.errors += 1,
        }
        if let Ok(r) = &result {
            if r.source == Source::Cache {
                m.prefetches += r.prefetches as u64;
            }
        }
        result
    }

    fn serve(&self, call: &ToolCall, session: &str) -> Result<ServeResult, ProxyError> {
        let key = SemanticKey::new(call.tool.clone(), call.query_text.clone())?;
        let client = self
            .clients
            .get(key.tool())
            .ok_or_else(|| ProxyError::UnknownTool(key.tool().to_string()))?
            .clone();
        let Some(mode) = self.lookup_mode() else {
            let fetch = client.fetch(&key, Priority::User)?;
            return Ok(ServeResult {
                value: fetch.result.clone(),
                source: Source::Remote,
                outcome: LookupOutcome {
                    kind: crate::cache::OutcomeKind::Miss,
                    element_id: None,
                    s_lsm: None,
                    similarity: None,
                    value: None,
                    cached_query: None,
                    candidates_considered: 0,
                    judge_calls: 0,
                    purged: 0,
                    timings: Default::default(),
                    embedding: None,
                    error: None,
                },
                fetch: Some(fetch),
                prefetches: 0,
            });
        };
        let outcome = self.cache.lookup(&key, self.clock.now(), mode, false);
        let (value, source, fetch) = if let (true, Some(v)) = (outcome.is_hit(), outcome.value.clone()) {
            self.prefetcher.record(session, key.text(), true);
            (v, Source::Cache, None)
        } else {
            let fetch = client.fetch(&key, Priority::User)?;
            if fetch.found {
                let now = self.clock.now();
                let element = self.cache.element_for(
                    key.clone(),
                    &fetch.result,
                    fetch.latency_ms,
                    fetch.cost_usd,
                    now,
                    outcome.embedding.clone(),
                )?;
                if let Err(e) = self.cache.admit(element, now) {
                    tracing::warn!(key = %key, error = %e, "fetched result not cached");
                }
            }
            self.prefetcher.record(session, key.text(), false);
            (fetch.result.clone(), Source::Remote, Some(fetch))
        };
        let prefetches = self.trigger_prefetch(&key, mode, &client);
        Ok(ServeResult {
            value,
            source,
            outcome,
            fetch,
            prefetches,
        })
    }

    fn trigger_prefetch(&self, key: &SemanticKey, mode: LookupMode, client: &Arc<RemoteToolClient>) -> usize {
        if self.prefetch == PrefetchExecution::Disabled {
            return 0;
        }
        let tickets = self.prefetcher.plan(key, &self.cache, self.clock.now(), mode);
        let n = tickets.len();
        for ticket in tickets {
            match self.prefetch {
                PrefetchExecution::Inline => run_prefetch(&self.cache, &self.prefetcher, client, ticket),
                _ => {
                    let (cache, prefetcher, client) = (self.cache.clone(), self.prefetcher.clone(), client.clone());
                    std::thread::spawn(move || run_prefetch(&cache, &prefetcher, &client, ticket));
                }
            }
        }
        n
    }

    /// Adds labeled pairs to the standing validation set.
    pub fn add_validation(&self, samples: impl IntoIterator<Item = AnnotatedSample>) {
        self.validation.lock().extend(samples);
    }

    /// Runs threshold recalibration and publishes the new `tau_lsm`. The
    /// sample budget is the per-minute rate times the minutes since the last
    /// run (at least one minute's worth).
    pub fn recalibrate(&self) -> Result<Recalibration, ProxyError> {
        let gt = self.ground_truth.as_ref().ok_or(ProxyError::NoGroundTruth)?;
        let now = self.clock.now();
        let minutes = {
            let mut last = self.last_recalibration.lock();
            let m = now.secs_since(*last) / 60.0;
            *last = now;
            m
        };
        let budget = ((minutes * self.samples_per_minute as f64).floor() as usize).max(self.samples_per_minute);
        let validation = self.validation.lock().clone();
        let result = recalibrate(
            self.cache.judge().as_ref(),
            gt.as_ref(),
            &self.cache.recent_log(),
            &validation,
            budget,
            self.cache.config().p_target,
        )?;
        self.cache.set_tau_lsm(result.threshold.value);
        if !result.threshold.feasible {
            tracing::warn!(tau = result.threshold.value, "no threshold meets the precision target; semantic hits disabled");
        }
        Ok(result)
    }

    pub fn snapshot(&self, dir: Option<&Path>) -> Result<PathBuf, ProxyError> {
        let dir = dir.unwrap_or(&self.snapshot_dir).to_path_buf();
        self.cache.save_snapshot(&dir)?;
        Ok(dir)
    }

    /// Metrics, cache statistics and ledger totals as one record.
    pub fn stats_record(&self) -> Record {
        let m = self.metrics();
        let s = self.cache.stats();
        let l = self.ledger();
        Record::new()
            .with("requests", m.requests)
            .with("hits", m.hits)
            .with("misses", m.misses)
            .with("errors", m.errors)
            .with("prefetches", m.prefetches)
            .with(
                "mean_latency_ms",
                if m.requests == 0 { 0.0 } else { m.total_latency_ms / m.requests as f64 },
            )
            .with("usage_tokens", s.usage_tokens)
            .with("capacity_tokens", s.capacity_tokens)
            .with("elements", s.elements)
            .with("evictions", s.evictions)
            .with("expirations", s.expirations)
            .with("tau_lsm", s.tau_lsm)
            .with("api_calls", l.api_calls())
            .with("billed_calls", l.call_count)
            .with("retries", l.retry_count)
            .with("throttle_events", l.throttle_events)
            .with("api_cost_usd", l.api_cost_usd())
    }
}

fn run_prefetch(cache: &SemanticCache, prefetcher: &Prefetcher, client: &RemoteToolClient, ticket: PrefetchTicket) {
    match client.fetch(&ticket.key, Priority::Prefetch) {
        Ok(record) => {
            let now = client.clock().now();
            if let Err(e) = admit_prefetched(cache, &record, now) {
                tracing::warn!(key = %ticket.key, error = %e, "prefetched result not admitted");
            }
        }
        Err(e) => tracing::debug!(key = %ticket.key, error = %e, "prefetch dropped"),
    }
    prefetcher.finish(ticket);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;

    fn vocab() -> Vec<String> {
        vec!["search".into(), "file_read".into()]
    }

    #[test]
    fn parses_search_after_think() {
        let text = "<think>I should look this up.</think><search>who painted the Mona Lisa?</search>";
        let p = parse_tool_calls(text, &vocab(), 0);
        assert_eq!(p.calls.len(), 1);
        assert_eq!(p.calls[0].tool, "search");
        assert_eq!(p.calls[0].query_text, "who painted the Mona Lisa?");
        assert_eq!(&text[p.calls[0].raw_span.clone()], "<search>who painted the Mona Lisa?</search>");
        assert!(p.diagnostics.is_empty());
    }

    #[test]
    fn no_tags_no_calls() {
        assert_eq!(parse_tool_calls("plain text, a < b", &vocab(), 0), ParsedOutput::default());
    }

    #[test]
    fn unclosed_tag_is_reported() {
        let p = parse_tool_calls("<search>abc", &vocab(), 0);
        assert!(p.calls.is_empty());
        assert_eq!(p.diagnostics.len(), 1);
    }

    #[test]
    fn multiple_calls_in_order_with_context() {
        let text = "<info>old</info>abc<search>x</search><file_read>src/lib.rs</file_read><search> </search>";
        let p = parse_tool_calls(text, &vocab(), 3);
        let got: Vec<_> = p.calls.iter().map(|c| (c.tool.as_str(), c.query_text.as_str())).collect();
        assert_eq!(got, vec![("search", "x"), ("file_read", "src/lib.rs")]);
        assert_eq!(p.calls[0].context.as_deref(), Some("abc"));
        assert_eq!(p.diagnostics.len(), 1);
    }

    fn proxy(mode: ModeConfig) -> (Proxy, Arc<VirtualClock>) {
        let clock = Arc::new(VirtualClock::default());
        let table = HashMap::from([("mona".to_string(), "Leonardo da Vinci painted the Mona Lisa".to_string())]);
        let resolver = HashMap::from([
            ("who painted the Mona Lisa?".to_string(), "mona".to_string()),
            ("the Mona Lisa was painted by whom?".to_string(), "mona".to_string()),
        ]);
        let service = Arc::new(SimulatedService::new(table, 400.0, 0.0, 1).with_resolver(resolver));
        let client = Arc::new(
            RemoteToolClient::new(ToolEndpointConfig::default(), service.clone(), clock.clone()).unwrap(),
        );
        let cache = Arc::new(
            SemanticCache::new(
                CacheConfig {
                    tau_sim: 0.7,
                    ..CacheConfig::default()
                },
                Arc::new(HashedBowEmbedder::default()),
                Arc::new(ReferenceJudge),
            )
            .unwrap(),
        );
        let p = Proxy::new(cache, vec![client], clock.clone(), mode)
            .with_ground_truth(Arc::new(ServiceGroundTruth(service)));
        (p, clock)
    }

    fn call(text: &str) -> ToolCall {
        ToolCall {
            tool: "search".into(),
            query_text: text.into(),
            raw_span: 0..0,
            context: None,
        }
    }

    #[test]
    fn cold_then_warm_then_paraphrase() {
        let (p, _) = proxy(ModeConfig::Full);
        let cold = p.handle(&call("who painted the Mona Lisa?"), "s").unwrap();
        assert_eq!(cold.source, Source::Remote);
        assert!(p.cache().usage_tokens() > 0);
        let warm = p.handle(&call("who painted the Mona Lisa?"), "s").unwrap();
        assert_eq!(warm.source, Source::Cache);
        let id = warm.outcome.element_id.unwrap();
        assert_eq!(p.cache().get(id).unwrap().frequency, 1);
        let para = p.handle(&call("the Mona Lisa was painted by whom?"), "s").unwrap();
        assert_eq!(para.source, Source::Cache);
        assert_eq!(para.value, cold.value);
        let m = p.metrics();
        assert_eq!((m.requests, m.hits, m.misses), (3, 2, 1));
    }

    #[test]
    fn vanilla_always_fetches() {
        let (p, clock) = proxy(ModeConfig::Vanilla);
        for _ in 0..3 {
            assert_eq!(p.handle(&call("who painted the Mona Lisa?"), "s").unwrap().source, Source::Remote);
        }
        assert!(p.cache().is_empty());
        assert_eq!(p.ledger().call_count, 3);
        assert_eq!(clock.now().as_millis_f64(), 1200.0);
    }

    #[test]
    fn remote_failure_leaves_cache_unchanged() {
        let (p, _) = proxy(ModeConfig::Full);
        let mut c = call("x");
        c.tool = "file_read".into();
        assert!(matches!(p.handle(&c, "s"), Err(ProxyError::UnknownTool(_))));
        assert!(p.cache().is_empty());
        assert_eq!(p.metrics().errors, 1);
    }

    #[test]
    fn config_parses_from_toml() {
        let text = r#"
            port = 9000
            tools = ["search"]
            mode = "ann_only"
            [cache]
            capacity_tokens = 5000
            tau_sim = 0.7
            [[endpoints]]
            name = "search"
            base_latency_ms = 300.0
            rate_limit_per_min = 100
            [endpoints.backend]
            jitter_seed = 3
        "#;
        let c = ProxyConfig::from_toml(text).unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.mode, ModeConfig::AnnOnly);
        assert_eq!(c.cache.capacity_tokens, 5000);
        assert_eq!(c.endpoints[0].endpoint.rate_limit_per_min, 100);
        assert_eq!(c.endpoints[0].backend.jitter_seed, 3);
        let p = Proxy::from_config(&c).unwrap();
        assert_eq!(p.tools(), &["search".to_string()]);
        assert!(ProxyConfig::from_toml("bogus = 1").is_err());
        assert!(ProxyConfig::from_toml("[cache]\ntau_sim = 2.0").is_err());
    }
}
