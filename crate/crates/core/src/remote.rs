//! Rate-limited access to remote tools, with cost and retry accounting.
//!
//! The limiter models the remote side's quota: at most `rate_limit_per_min`
//! permits in any sliding 60 s window. A refused attempt is a throttle event
//! and, as with an HTTP 429, still counts as an API call. User requests retry
//! with exponential backoff `backoff_base_ms · 2^attempt`; prefetch requests
//! get a single attempt, are refused while a user request waits, and only run
//! while the window keeps [`PREFETCH_RESERVE`] of the quota free for users.
//!
//! Money is tracked in integer micro-dollars so that totals are exact.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::model::SemanticKey;
use crate::text::canonicalize;

/// Sliding window length.
pub const WINDOW: Duration = Duration::from_secs(60);

/// Fraction of the per-window quota that prefetches may not consume.
pub const PREFETCH_RESERVE: f64 = 0.1;

/// Result text returned for keys the service does not know.
pub const NOT_FOUND: &str = "[not found]";

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("rate limited after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("prefetch deferred: quota reserved for user requests")]
    Deferred,
    #[error("remote transport failure: {0}")]
    Transport(String),
    #[error("no endpoint configured for tool `{0}`")]
    UnknownTool(String),
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("ground-truth table line {line}: {reason}")]
    Table { line: usize, reason: String },
}

impl FetchError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, FetchError::Transport(_) | FetchError::RateLimited { .. } | FetchError::Deferred)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Priority {
    User,
    Prefetch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolEndpointConfig {
    pub name: String,
    pub base_latency_ms: f64,
    pub latency_jitter_ms: f64,
    pub cost_per_call_usd: f64,
    pub rate_limit_per_min: u32,
    pub max_retries: u32,
    pub backoff_base_ms: f64,
}

impl Default for ToolEndpointConfig {
    fn default() -> Self {
        ToolEndpointConfig {
            name: "search".into(),
            base_latency_ms: 300.0,
            latency_jitter_ms: 0.0,
            cost_per_call_usd: 0.005,
            rate_limit_per_min: 100,
            max_retries: 8,
            backoff_base_ms: 500.0,
        }
    }
}

impl ToolEndpointConfig {
    pub fn validate(&self) -> Result<(), FetchError> {
        let fields = [
            ("base_latency_ms", self.base_latency_ms),
            ("latency_jitter_ms", self.latency_jitter_ms),
            ("cost_per_call_usd", self.cost_per_call_usd),
            ("backoff_base_ms", self.backoff_base_ms),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FetchError::Config(format!("{name} = {v} must be non-negative")));
            }
        }
        if self.rate_limit_per_min == 0 {
            return Err(FetchError::Config("rate_limit_per_min must be at least 1".into()));
        }
        if self.name.trim().is_empty() {
            return Err(FetchError::Config("name is empty".into()));
        }
        Ok(())
    }

    pub fn cost_micros(&self) -> u64 {
        usd_to_micros(self.cost_per_call_usd)
    }

    /// Wait before retry number `attempt + 1`.
    pub fn backoff_ms(&self, attempt: u32) -> f64 {
        self.backoff_base_ms * 2f64.powi(attempt as i32)
    }
}

pub fn usd_to_micros(usd: f64) -> u64 {
    (usd * 1e6).round() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchRecord {
    pub query: SemanticKey,
    pub result: String,
    /// Elapsed from the first attempt to the reply, including backoff.
    pub latency_ms: f64,
    pub cost_usd: f64,
    pub retries: u32,
    pub throttled: bool,
    pub found: bool,
}

/// Sliding-window permit counter.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    limit: usize,
    grants: VecDeque<Timestamp>,
}

impl SlidingWindow {
    pub fn new(limit_per_min: u32) -> Self {
        SlidingWindow {
            limit: limit_per_min.max(1) as usize,
            grants: VecDeque::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    fn expire(&mut self, now: Timestamp) {
        while let Some(&front) = self.grants.front() {
            if now - front >= WINDOW {
                self.grants.pop_front();
            } else {
                break;
            }
        }
    }

    /// Permits granted within the window ending at `now`.
    pub fn in_window(&mut self, now: Timestamp) -> usize {
        self.expire(now);
        self.grants.len()
    }

    /// Grants a permit, or returns when the next one frees up.
    pub fn try_acquire(&mut self, now: Timestamp) -> Result<(), Timestamp> {
        self.expire(now);
        if self.grants.len() < self.limit {
            self.grants.push_back(now);
            Ok(())
        } else {
            Err(self.grants[0] + WINDOW)
        }
    }

    /// Like [`Self::try_acquire`] but also requires `reserve` permits to stay
    /// free afterwards.
    pub fn try_acquire_leaving(&mut self, now: Timestamp, reserve: usize) -> bool {
        self.expire(now);
        if self.grants.len() + reserve < self.limit {
            self.grants.push_back(now);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerTotals {
    /// Billed spend in micro-dollars.
    pub api_cost_micros: u64,
    /// Successful, billed calls.
    pub call_count: u64,
    /// Calls answered with the not-found marker; never billed.
    pub not_found_count: u64,
    pub retry_count: u64,
    pub throttle_events: u64,
}

impl LedgerTotals {
    pub fn api_cost_usd(&self) -> f64 {
        self.api_cost_micros as f64 / 1e6
    }

    /// Every request that reached the remote side, throttled ones included.
    pub fn api_calls(&self) -> u64 {
        self.call_count + self.not_found_count + self.throttle_events
    }
}

/// Monotone counters shared by every fetch against one endpoint.
#[derive(Debug, Default)]
pub struct CostLedger {
    cost_micros: AtomicU64,
    calls: AtomicU64,
    not_found: AtomicU64,
    retries: AtomicU64,
    throttles: AtomicU64,
    guard: Mutex<()>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&self, micros: u64) {
        let _g = self.guard.lock();
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.cost_micros.fetch_add(micros, Ordering::Relaxed);
    }

    pub fn not_found(&self) {
        self.not_found.fetch_add(1, Ordering::Relaxed);
    }

    pub fn throttle(&self) {
        self.throttles.fetch_add(1, Ordering::Relaxed);
    }

    pub fn retry(&self) {
        self.retries.fetch_add(1, Ordering::Relaxed);
    }

    /// Cost and call count are read under the same guard as `charge`, so a
    /// snapshot never splits a charge.
    pub fn totals(&self) -> LedgerTotals {
        let _g = self.guard.lock();
        LedgerTotals {
            api_cost_micros: self.cost_micros.load(Ordering::Relaxed),
            call_count: self.calls.load(Ordering::Relaxed),
            not_found_count: self.not_found.load(Ordering::Relaxed),
            retry_count: self.retries.load(Ordering::Relaxed),
            throttle_events: self.throttles.load(Ordering::Relaxed),
        }
    }
}

/// One answered remote call.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceReply {
    /// `None` when the service does not know the key.
    pub result: Option<String>,
    pub latency_ms: f64,
}

/// The thing behind the rate limit.
pub trait RemoteService: Send + Sync {
    /// Answers `key`. Implementations report latency but do not sleep; the
    /// caller decides how time passes.
    fn call(&self, key: &SemanticKey) -> Result<ServiceReply, FetchError>;
}

/// Deterministic stand-in for a search API: a ground-truth table, a
/// text-to-key resolver and seeded latency jitter.
#[derive(Debug)]
pub struct SimulatedService {
    table: HashMap<String, String>,
    resolver: HashMap<String, String>,
    base_latency_ms: f64,
    jitter_ms: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl SimulatedService {
    pub fn new(table: HashMap<String, String>, base_latency_ms: f64, jitter_ms: f64, seed: u64) -> Self {
        SimulatedService {
            table,
            resolver: HashMap::new(),
            base_latency_ms,
            jitter_ms,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Maps query texts to ground-truth keys. Texts are compared in
    /// canonical form; unmapped texts are looked up as keys themselves.
    pub fn with_resolver(mut self, resolver: HashMap<String, String>) -> Self {
        self.resolver = resolver.into_iter().map(|(k, v)| (canonicalize(&k), v)).collect();
        self
    }

    pub fn table(&self) -> &HashMap<String, String> {
        &self.table
    }

    pub fn ground_truth_key<'a>(&'a self, text: &'a str) -> &'a str {
        self.resolver.get(&canonicalize(text)).map(String::as_str).unwrap_or(text)
    }

    /// Canonical result for a ground-truth key.
    pub fn answer(&self, gt_key: &str) -> Option<&str> {
        self.table.get(gt_key).map(String::as_str)
    }

    /// Next latency sample: uniform in `base ± jitter`, never negative.
    pub fn sample_latency_ms(&self) -> f64 {
        if self.jitter_ms == 0.0 {
            return self.base_latency_ms;
        }
        let u: f64 = self.rng.lock().random_range(-1.0..=1.0);
        (self.base_latency_ms + u * self.jitter_ms).max(0.0)
    }

    pub fn call_key(&self, gt_key: &str) -> ServiceReply {
        ServiceReply {
            result: self.answer(gt_key).map(str::to_string),
            latency_ms: self.sample_latency_ms(),
        }
    }
}

impl RemoteService for SimulatedService {
    fn call(&self, key: &SemanticKey) -> Result<ServiceReply, FetchError> {
        Ok(self.call_key(self.ground_truth_key(key.text())))
    }
}

/// Parses a ground-truth table: one `key<TAB>result` per line; blank lines
/// and lines starting with `#` are skipped.
pub fn parse_table(text: &str) -> Result<HashMap<String, String>, FetchError> {
    let mut table = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('\t').ok_or(FetchError::Table {
            line: i + 1,
            reason: "missing tab".into(),
        })?;
        let bad = || FetchError::Table {
            line: i + 1,
            reason: "bad escape".into(),
        };
        let k = crate::kv::unescape(k).ok_or_else(bad)?;
        let v = crate::kv::unescape(v).ok_or_else(bad)?;
        table.insert(k, v);
    }
    Ok(table)
}

pub fn format_table(table: &HashMap<String, String>) -> String {
    let mut keys: Vec<&String> = table.keys().collect();
    keys.sort();
    keys.into_iter()
        .map(|k| format!("{}\t{}\n", crate::kv::escape(k), crate::kv::escape(&table[k])))
        .collect()
}

/// Live HTTP tool. `{query}` in the URL template is replaced by the
/// percent-encoded query text; the response body is the result. An auth
/// header value is read from an environment variable at construction.
pub struct HttpService {
    url_template: String,
    client: reqwest::blocking::Client,
    auth: Option<(String, String)>,
}

impl std::fmt::Debug for HttpService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpService")
            .field("url_template", &self.url_template)
            .field("auth", &self.auth.as_ref().map(|(h, _)| h))
            .finish()
    }
}

impl HttpService {
    pub fn new(
        url_template: impl Into<String>,
        timeout: Duration,
        auth_header: Option<&str>,
        auth_env_var: Option<&str>,
    ) -> Result<Self, FetchError> {
        let url_template = url_template.into();
        if !url_template.contains("{query}") {
            return Err(FetchError::Config("url template lacks {query}".into()));
        }
        let auth = match (auth_header, auth_env_var) {
            (Some(h), Some(var)) => {
                let v = std::env::var(var)
                    .map_err(|_| FetchError::Config(format!("environment variable {var} is not set")))?;
                Some((h.to_string(), v))
            }
            _ => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| FetchError::Config(e.to_string()))?;
        Ok(HttpService {
            url_template,
            client,
            auth,
        })
    }

    pub fn url_for(&self, text: &str) -> String {
        self.url_template
            .replace("{query}", &utf8_percent_encode(text, NON_ALPHANUMERIC).to_string())
    }
}

impl RemoteService for HttpService {
    fn call(&self, key: &SemanticKey) -> Result<ServiceReply, FetchError> {
        let started = std::time::Instant::now();
        let mut req = self.client.get(self.url_for(key.text()));
        if let Some((h, v)) = &self.auth {
            req = req.header(h.as_str(), v.as_str());
        }
        let resp = req.send().map_err(|e| FetchError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(FetchError::RateLimited { retries: 0 });
        }
        let body = resp.text().map_err(|e| FetchError::Transport(e.to_string()))?;
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        if status.as_u16() == 404 {
            return Ok(ServiceReply { result: None, latency_ms });
        }
        if !status.is_success() {
            return Err(FetchError::Transport(format!("HTTP {status}")));
        }
        Ok(ServiceReply {
            result: Some(body),
            latency_ms,
        })
    }
}

/// Outcome of asking the limiter for one attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attempt {
    Granted,
    /// Refused; a user request may retry at `retry_at`.
    Throttled { retry_at: Timestamp },
    /// Retries exhausted, or a prefetch was refused.
    GiveUp,
}

/// Rate-limited client for one endpoint.
pub struct RemoteToolClient {
    config: ToolEndpointConfig,
    window: Mutex<SlidingWindow>,
    ledger: Arc<CostLedger>,
    service: Arc<dyn RemoteService>,
    clock: Arc<dyn Clock>,
    users_waiting: AtomicUsize,
}

impl std::fmt::Debug for RemoteToolClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteToolClient")
            .field("config", &self.config)
            .field("ledger", &self.ledger.totals())
            .finish()
    }
}

impl RemoteToolClient {
    pub fn new(
        config: ToolEndpointConfig,
        service: Arc<dyn RemoteService>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, FetchError> {
        config.validate()?;
        Ok(RemoteToolClient {
            window: Mutex::new(SlidingWindow::new(config.rate_limit_per_min)),
            config,
            ledger: Arc::new(CostLedger::new()),
            service,
            clock,
            users_waiting: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ToolEndpointConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Arc<CostLedger> {
        &self.ledger
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn prefetch_reserve(&self) -> usize {
        (self.config.rate_limit_per_min as f64 * PREFETCH_RESERVE).ceil() as usize
    }

    /// One permit request. `attempt` counts earlier refusals of the same
    /// fetch. Accounting (throttles, retries) is recorded here.
    pub fn attempt(&self, now: Timestamp, priority: Priority, attempt: u32) -> Attempt {
        let mut window = self.window.lock();
        match priority {
            Priority::Prefetch => {
                if self.users_waiting.load(Ordering::SeqCst) == 0
                    && window.try_acquire_leaving(now, self.prefetch_reserve())
                {
                    Attempt::Granted
                } else {
                    // Refused client-side; nothing reached the server.
                    Attempt::GiveUp
                }
            }
            Priority::User => match window.try_acquire(now) {
                Ok(()) => Attempt::Granted,
                Err(_) => {
                    self.ledger.throttle();
                    if attempt >= self.config.max_retries {
                        Attempt::GiveUp
                    } else {
                        self.ledger.retry();
                        Attempt::Throttled {
                            retry_at: now.plus_millis(self.config.backoff_ms(attempt)),
                        }
                    }
                }
            },
        }
    }

    /// Marks a user request as waiting for a permit outside [`Self::fetch`],
    /// which blocks prefetches until [`Self::end_user_wait`].
    pub fn begin_user_wait(&self) {
        self.users_waiting.fetch_add(1, Ordering::SeqCst);
    }

    pub fn end_user_wait(&self) {
        self.users_waiting.fetch_sub(1, Ordering::SeqCst);
    }

    /// Bills a completed call.
    pub fn settle(&self, found: bool) -> f64 {
        if found {
            self.ledger.charge(self.config.cost_micros());
            self.config.cost_per_call_usd
        } else {
            self.ledger.not_found();
            0.0
        }
    }

    /// Blocking fetch: waits out throttles on the client's clock, then calls
    /// the service and waits its latency. Never holds cache locks.
    pub fn fetch(&self, key: &SemanticKey, priority: Priority) -> Result<FetchRecord, FetchError> {
        let started = self.clock.now();
        let mut retries = 0u32;
        let mut throttled = false;
        if priority == Priority::User {
            self.users_waiting.fetch_add(1, Ordering::SeqCst);
        }
        let granted = loop {
            match self.attempt(self.clock.now(), priority, retries) {
                Attempt::Granted => break Ok(()),
                Attempt::Throttled { retry_at } => {
                    throttled = true;
                    retries += 1;
                    self.clock.sleep(retry_at - self.clock.now());
                }
                Attempt::GiveUp => {
                    break Err(match priority {
                        Priority::User => FetchError::RateLimited { retries },
                        Priority::Prefetch => FetchError::Deferred,
                    })
                }
            }
        };
        if priority == Priority::User {
            self.users_waiting.fetch_sub(1, Ordering::SeqCst);
        }
        granted?;
        let reply = self.service.call(key)?;
        self.clock.sleep(Duration::from_secs_f64(reply.latency_ms / 1e3));
        let found = reply.result.is_some();
        let cost_usd = self.settle(found);
        Ok(FetchRecord {
            query: key.clone(),
            result: reply.result.unwrap_or_else(|| NOT_FOUND.to_string()),
            latency_ms: self.clock.now().millis_since(started),
            cost_usd,
            retries,
            throttled,
            found,
        })
    }
}
