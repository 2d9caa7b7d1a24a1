//! The capacity-limited semantic cache.
//!
//! Lookups embed the request, take up to `candidate_k` index candidates with
//! similarity `>= tau_sim`, and walk them in descending similarity. Expired
//! candidates are skipped (and purged unless the lookup is a peek); the first
//! candidate the judge accepts is the hit. Admission inserts the element and
//! then runs an eviction pass: expired elements go first, then the remaining
//! elements are ranked once and removed lowest-first until usage fits.
//!
//! Invariants after every public call: `usage_tokens` equals the sum of
//! resident sizes, usage never exceeds capacity, and the element map and the
//! vector index hold exactly the same ids.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::RwLock;
use thiserror::Error;

use crate::clock::Timestamp;
use crate::embed::{EmbedError, Embedder};
use crate::index::{HnswParams, IndexError, VectorIndex};
use crate::judge::Judge;
use crate::kv::{self, Record};
use crate::model::{
    make_element, CacheConfig, ElementId, EmbeddingVector, ModelError, SemanticElement, SemanticKey,
    DEFAULT_STATICITY,
};
use crate::recalibrate::LogEntry;

/// Upper bound on retained hit log entries.
pub const RECENT_LOG_CAP: usize = 4096;

const ELEMENTS_FILE: &str = "elements.rec";
const INDEX_FILE: &str = "index.bin";
const META_FILE: &str = "meta.rec";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("element of {size} tokens exceeds capacity {capacity}")]
    Oversize { size: u64, capacity: u64 },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("snapshot i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot is inconsistent: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LookupMode {
    /// Similarity gate followed by judge validation.
    #[default]
    Full,
    /// Similarity gate only.
    AnnOnly,
    /// Literal key equality.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvictionPolicy {
    /// Lowest frequency/cost/latency/staticity value per token first.
    #[default]
    Lcfu,
    /// Least recently admitted or hit first.
    Lru,
    /// Lowest hit count first.
    Lfu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    Hit,
    Miss,
}

/// Measured wall time per lookup stage, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub embed_ms: f64,
    pub index_ms: f64,
    pub judge_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookupOutcome {
    pub kind: OutcomeKind,
    pub element_id: Option<ElementId>,
    pub s_lsm: Option<f64>,
    pub similarity: Option<f64>,
    pub value: Option<String>,
    pub cached_query: Option<String>,
    pub candidates_considered: usize,
    pub judge_calls: usize,
    pub purged: usize,
    pub timings: StageTimings,
    /// Query embedding, reusable for admission after a miss.
    pub embedding: Option<EmbeddingVector>,
    /// Embedder or judge failure that forced a miss.
    pub error: Option<String>,
}

impl LookupOutcome {
    fn miss() -> Self {
        LookupOutcome {
            kind: OutcomeKind::Miss,
            element_id: None,
            s_lsm: None,
            similarity: None,
            value: None,
            cached_query: None,
            candidates_considered: 0,
            judge_calls: 0,
            purged: 0,
            timings: StageTimings::default(),
            embedding: None,
            error: None,
        }
    }

    pub fn is_hit(&self) -> bool {
        self.kind == OutcomeKind::Hit
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvictionReport {
    pub expired: Vec<ElementId>,
    /// Score-ranked victims in removal order.
    pub evicted: Vec<ElementId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmitReport {
    pub id: ElementId,
    /// Resident element with the identical key that was replaced.
    pub replaced: Option<ElementId>,
    pub eviction: EvictionReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CacheStats {
    pub usage_tokens: u64,
    pub capacity_tokens: u64,
    pub elements: usize,
    pub hits: u64,
    pub misses: u64,
    pub admissions: u64,
    pub rejections: u64,
    pub evictions: u64,
    pub expirations: u64,
    pub tau_lsm: f64,
}

/// Eviction value of an element: `ln(F+1)·ln(1000·C+1)·ln(L+1)·ln(S+1)/Size`.
/// Zero when the size is zero or the element has expired.
pub fn cal_score(se: &SemanticElement, now: Timestamp) -> f64 {
    cal_score_with_base(se, now, std::f64::consts::E)
}

/// [`cal_score`] with logarithms in `base`.
pub fn cal_score_with_base(se: &SemanticElement, now: Timestamp, base: f64) -> f64 {
    let ttl = se.ttl_remaining_secs(now);
    if se.size_tokens == 0 || ttl <= 0.0 {
        return 0.0;
    }
    let log = |x: f64| x.log(base);
    log(se.frequency as f64 + 1.0)
        * log(se.retrieval_cost_usd * 1e3 + 1.0)
        * log(se.retrieval_latency_ms + 1.0)
        * log(f64::from(se.staticity) + 1.0)
        / se.size_tokens as f64
}

#[derive(Debug, Clone)]
struct Slot {
    element: SemanticElement,
    last_access: Timestamp,
}

#[derive(Debug)]
struct State {
    capacity_tokens: u64,
    elements: BTreeMap<ElementId, Slot>,
    exact: HashMap<SemanticKey, ElementId>,
    index: VectorIndex,
    usage_tokens: u64,
    next_id: u64,
    recent: VecDeque<LogEntry>,
    stats: CacheStats,
}

impl State {
    fn remove(&mut self, id: ElementId) -> Option<SemanticElement> {
        let slot = self.elements.remove(&id)?;
        self.index
            .remove(id)
            .expect("element map and index hold the same ids");
        if self.exact.get(&slot.element.key) == Some(&id) {
            self.exact.remove(&slot.element.key);
        }
        self.usage_tokens -= slot.element.size_tokens;
        Some(slot.element)
    }

    fn purge_expired(&mut self, now: Timestamp, keep: Option<ElementId>) -> Vec<ElementId> {
        let expired: Vec<ElementId> = self
            .elements
            .iter()
            .filter(|(id, s)| Some(**id) != keep && s.element.is_expired(now))
            .map(|(id, _)| *id)
            .collect();
        for &id in &expired {
            self.remove(id);
        }
        self.stats.expirations += expired.len() as u64;
        expired
    }

    fn evict_to(
        &mut self,
        target: u64,
        now: Timestamp,
        policy: EvictionPolicy,
        log_base: f64,
        keep: Option<ElementId>,
    ) -> EvictionReport {
        let expired = self.purge_expired(now, keep);
        let mut evicted = Vec::new();
        if self.usage_tokens > target {
            for slot in self.elements.values_mut() {
                slot.element.value_score = cal_score_with_base(&slot.element, now, log_base);
            }
            let order = victim_order(
                self.elements
                    .iter()
                    .filter(|(id, _)| Some(**id) != keep)
                    .map(|(id, s)| (*id, &s.element, s.last_access)),
                policy,
            );
            for id in order {
                if self.usage_tokens <= target {
                    break;
                }
                self.remove(id);
                evicted.push(id);
            }
            self.stats.evictions += evicted.len() as u64;
        }
        EvictionReport { expired, evicted }
    }
}

/// Victims in removal order for `policy`: ascending rank, then older
/// `created_at`, then ascending id. LCFU ranks by the cached `value_score`.
pub fn victim_order<'a>(
    items: impl IntoIterator<Item = (ElementId, &'a SemanticElement, Timestamp)>,
    policy: EvictionPolicy,
) -> Vec<ElementId> {
    let mut ranked: Vec<(f64, Timestamp, ElementId)> = items
        .into_iter()
        .map(|(id, el, last_access)| {
            let rank = match policy {
                EvictionPolicy::Lcfu => el.value_score,
                EvictionPolicy::Lru => last_access.as_micros() as f64,
                EvictionPolicy::Lfu => el.frequency as f64,
            };
            (rank, el.created_at, id)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    ranked.into_iter().map(|r| r.2).collect()
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub policy: EvictionPolicy,
    /// Logarithm base for LCFU scores; ordering does not depend on it.
    pub log_base: f64,
    pub hnsw: HnswParams,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            policy: EvictionPolicy::Lcfu,
            log_base: std::f64::consts::E,
            hnsw: HnswParams::default(),
        }
    }
}

/// Thread-safe cache engine. Lookups share a read lock; admission, eviction
/// and frequency updates take the write lock. Embedding and judging run
/// outside any lock.
pub struct SemanticCache {
    config: CacheConfig,
    tau_lsm_bits: AtomicU64,
    options: EngineOptions,
    embedder: Arc<dyn Embedder>,
    judge: Arc<dyn Judge>,
    state: RwLock<State>,
}

impl std::fmt::Debug for SemanticCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemanticCache")
            .field("config", &self.config)
            .field("options", &self.options)
            .field("stats", &self.stats())
            .finish()
    }
}

impl SemanticCache {
    pub fn new(
        config: CacheConfig,
        embedder: Arc<dyn Embedder>,
        judge: Arc<dyn Judge>,
    ) -> Result<Self, CacheError> {
        Self::with_options(config, embedder, judge, EngineOptions::default())
    }

    pub fn with_options(
        config: CacheConfig,
        embedder: Arc<dyn Embedder>,
        judge: Arc<dyn Judge>,
        options: EngineOptions,
    ) -> Result<Self, CacheError> {
        config.validate()?;
        let index = VectorIndex::with_params(embedder.dimension(), embedder.seed(), options.hnsw.clone());
        let state = State {
            capacity_tokens: config.capacity_tokens,
            elements: BTreeMap::new(),
            exact: HashMap::new(),
            index,
            usage_tokens: 0,
            next_id: 1,
            recent: VecDeque::new(),
            stats: CacheStats::default(),
        };
        Ok(SemanticCache {
            tau_lsm_bits: AtomicU64::new(config.tau_lsm.to_bits()),
            config,
            options,
            embedder,
            judge,
            state: RwLock::new(state),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn judge(&self) -> &Arc<dyn Judge> {
        &self.judge
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.options.policy
    }

    pub fn tau_lsm(&self) -> f64 {
        f64::from_bits(self.tau_lsm_bits.load(Ordering::Acquire))
    }

    /// Publishes a new judge threshold; lookups see the old or the new value.
    pub fn set_tau_lsm(&self, tau: f64) {
        self.tau_lsm_bits.store(tau.to_bits(), Ordering::Release);
    }

    /// Runs the lookup pipeline. A `peek` has no side effects: no purge, no
    /// frequency or recency update, no counters, no hit log entry.
    pub fn lookup(&self, key: &SemanticKey, now: Timestamp, mode: LookupMode, peek: bool) -> LookupOutcome {
        let mut out = LookupOutcome::miss();
        if mode == LookupMode::Exact {
            let started = Instant::now();
            let found = {
                let state = self.state.read();
                state
                    .exact
                    .get(key)
                    .and_then(|id| state.elements.get(id).map(|s| (*id, s.element.clone())))
            };
            out.timings.index_ms = started.elapsed().as_secs_f64() * 1e3;
            match found {
                Some((id, el)) if !el.is_expired(now) => {
                    out.candidates_considered = 1;
                    self.mark_hit(&mut out, id, el, 1.0, None, key, peek, now);
                }
                Some((id, _)) => {
                    out.candidates_considered = 1;
                    if !peek {
                        out.purged = self.purge_ids(&[id], now);
                    }
                }
                None => {}
            }
            self.count(&out, peek);
            return out;
        }

        let started = Instant::now();
        let embedding = match self.embedder.embed(key.text()) {
            Ok(e) => e,
            Err(e) => {
                out.error = Some(format!("embedder: {e}"));
                self.count(&out, peek);
                return out;
            }
        };
        out.timings.embed_ms = started.elapsed().as_secs_f64() * 1e3;

        let started = Instant::now();
        let candidates: Vec<(ElementId, f64, SemanticElement)> = {
            let state = self.state.read();
            state
                .index
                .approx_query(&embedding, self.config.tau_sim, self.config.candidate_k)
                .into_iter()
                .filter_map(|c| {
                    state
                        .elements
                        .get(&c.element_id)
                        .filter(|s| s.element.key.tool() == key.tool())
                        .map(|s| (c.element_id, c.similarity, s.element.clone()))
                })
                .collect()
        };
        out.timings.index_ms = started.elapsed().as_secs_f64() * 1e3;
        out.candidates_considered = candidates.len();
        out.embedding = Some(embedding);

        let tau_lsm = self.tau_lsm();
        let mut expired = Vec::new();
        let started = Instant::now();
        for (id, sim, el) in candidates {
            if el.is_expired(now) {
                expired.push(id);
                continue;
            }
            if mode == LookupMode::AnnOnly {
                self.mark_hit(&mut out, id, el, sim, None, key, peek, now);
                break;
            }
            out.judge_calls += 1;
            match crate::judge::validate(self.judge.as_ref(), key.text(), &el, tau_lsm) {
                Ok(v) if v.hit => {
                    self.mark_hit(&mut out, id, el, sim, Some(v.s_lsm), key, peek, now);
                    break;
                }
                Ok(_) => {}
                Err(e) => out.error = Some(format!("judge: {e}")),
            }
        }
        out.timings.judge_ms = started.elapsed().as_secs_f64() * 1e3;
        if !peek && !expired.is_empty() {
            out.purged = self.purge_ids(&expired, now);
        }
        self.count(&out, peek);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn mark_hit(
        &self,
        out: &mut LookupOutcome,
        id: ElementId,
        el: SemanticElement,
        similarity: f64,
        s_lsm: Option<f64>,
        key: &SemanticKey,
        peek: bool,
        now: Timestamp,
    ) {
        out.kind = OutcomeKind::Hit;
        out.element_id = Some(id);
        out.similarity = Some(similarity);
        out.s_lsm = s_lsm;
        if !peek {
            let mut state = self.state.write();
            // The element may have been evicted since it was read; the hit
            // still stands but there is nothing left to credit.
            if let Some(slot) = state.elements.get_mut(&id) {
                slot.element.frequency += 1;
                slot.element.value_score = cal_score_with_base(&slot.element, now, self.options.log_base);
                slot.last_access = now;
            }
            if let (Some(s), Some(emb)) = (s_lsm, out.embedding.as_ref()) {
                if state.recent.len() == RECENT_LOG_CAP {
                    state.recent.pop_front();
                }
                state.recent.push_back(LogEntry {
                    query: key.text().to_string(),
                    cached_query: el.key.text().to_string(),
                    served_result: el.value.clone(),
                    s_lsm: s,
                    embedding: emb.clone(),
                });
            }
        }
        out.cached_query = Some(el.key.text().to_string());
        out.value = Some(el.value);
    }

    fn count(&self, out: &LookupOutcome, peek: bool) {
        if peek {
            return;
        }
        let mut state = self.state.write();
        match out.kind {
            OutcomeKind::Hit => state.stats.hits += 1,
            OutcomeKind::Miss => state.stats.misses += 1,
        }
    }

    fn purge_ids(&self, ids: &[ElementId], now: Timestamp) -> usize {
        let mut state = self.state.write();
        let mut n = 0;
        for &id in ids {
            let still_expired = state.elements.get(&id).is_some_and(|s| s.element.is_expired(now));
            if still_expired {
                state.remove(id);
                n += 1;
            }
        }
        state.stats.expirations += n as u64;
        n
    }

    /// Builds an element for a freshly fetched result: embeds the key (unless
    /// `embedding` is supplied), asks the judge for staticity (neutral
    /// default if it fails) and applies the configured TTL.
    pub fn element_for(
        &self,
        key: SemanticKey,
        value: &str,
        latency_ms: f64,
        cost_usd: f64,
        now: Timestamp,
        embedding: Option<EmbeddingVector>,
    ) -> Result<SemanticElement, CacheError> {
        let embedding = match embedding {
            Some(e) => e,
            None => self.embedder.embed(key.text())?,
        };
        let staticity = self.judge.staticity(key.text(), value).unwrap_or(DEFAULT_STATICITY);
        Ok(make_element(
            key,
            value,
            embedding,
            staticity,
            latency_ms,
            cost_usd,
            now,
            self.config.ttl_seconds,
        )?)
    }

    /// Side-effect-free semantic membership test.
    pub fn contains(&self, key: &SemanticKey, now: Timestamp, mode: LookupMode) -> bool {
        self.lookup(key, now, mode, true).is_hit()
    }

    /// Inserts `element` and evicts until usage fits. The new element is
    /// never its own victim. A resident element with the identical key is
    /// replaced.
    pub fn admit(&self, mut element: SemanticElement, now: Timestamp) -> Result<AdmitReport, CacheError> {
        let mut state = self.state.write();
        if element.size_tokens > state.capacity_tokens {
            state.stats.rejections += 1;
            return Err(CacheError::Oversize {
                size: element.size_tokens,
                capacity: state.capacity_tokens,
            });
        }
        let id = ElementId(state.next_id);
        let replaced = state.exact.get(&element.key).copied();
        if let Some(old) = replaced {
            state.remove(old);
        }
        element.value_score = cal_score_with_base(&element, now, self.options.log_base);
        state.index.insert(id, element.embedding.clone())?;
        state.next_id += 1;
        state.usage_tokens += element.size_tokens;
        state.exact.insert(element.key.clone(), id);
        state.elements.insert(
            id,
            Slot {
                element,
                last_access: now,
            },
        );
        state.stats.admissions += 1;
        let target = state.capacity_tokens;
        let eviction = state.evict_to(target, now, self.options.policy, self.options.log_base, Some(id));
        Ok(AdmitReport { id, replaced, eviction })
    }

    /// Purges expired elements, then evicts by rank until usage fits capacity.
    pub fn evict_until_fits(&self, now: Timestamp) -> EvictionReport {
        let mut state = self.state.write();
        let target = state.capacity_tokens;
        state.evict_to(target, now, self.options.policy, self.options.log_base, None)
    }

    /// Like [`Self::evict_until_fits`] but against an arbitrary usage target.
    pub fn evict_to(&self, target_tokens: u64, now: Timestamp) -> EvictionReport {
        self.state
            .write()
            .evict_to(target_tokens, now, self.options.policy, self.options.log_base, None)
    }

    /// Removes every element with `expiration_time <= now`.
    pub fn remove_expired(&self, now: Timestamp) -> usize {
        self.state.write().purge_expired(now, None).len()
    }

    pub fn remove(&self, id: ElementId) -> Option<SemanticElement> {
        self.state.write().remove(id)
    }

    /// Changes the budget and evicts down to it.
    pub fn set_capacity(&self, capacity_tokens: u64, now: Timestamp) -> EvictionReport {
        let mut state = self.state.write();
        state.capacity_tokens = capacity_tokens;
        state.stats.capacity_tokens = capacity_tokens;
        state.evict_to(capacity_tokens, now, self.options.policy, self.options.log_base, None)
    }

    pub fn get(&self, id: ElementId) -> Option<SemanticElement> {
        self.state.read().elements.get(&id).map(|s| s.element.clone())
    }

    pub fn elements(&self) -> Vec<(ElementId, SemanticElement)> {
        self.state
            .read()
            .elements
            .iter()
            .map(|(id, s)| (*id, s.element.clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.state.read().elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn usage_tokens(&self) -> u64 {
        self.state.read().usage_tokens
    }

    pub fn stats(&self) -> CacheStats {
        let state = self.state.read();
        CacheStats {
            usage_tokens: state.usage_tokens,
            capacity_tokens: state.capacity_tokens,
            elements: state.elements.len(),
            tau_lsm: self.tau_lsm(),
            ..state.stats
        }
    }

    pub fn recent_log(&self) -> Vec<LogEntry> {
        self.state.read().recent.iter().cloned().collect()
    }

    /// Checks the usage, capacity and index/element bijection invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let state = self.state.read();
        let sum: u64 = state.elements.values().map(|s| s.element.size_tokens).sum();
        if sum != state.usage_tokens {
            return Err(format!("usage {} != resident sum {sum}", state.usage_tokens));
        }
        if state.usage_tokens > state.capacity_tokens {
            return Err(format!("usage {} > capacity {}", state.usage_tokens, state.capacity_tokens));
        }
        let ids: Vec<ElementId> = state.elements.keys().copied().collect();
        let indexed: Vec<ElementId> = state.index.ids().collect();
        if ids != indexed {
            return Err("element map and index disagree".into());
        }
        Ok(())
    }

    /// Writes `meta.rec`, `elements.rec` and `index.bin` into `dir`.
    pub fn save_snapshot(&self, dir: &Path) -> Result<(), CacheError> {
        fs::create_dir_all(dir)?;
        let state = self.state.read();
        let meta = Record::new()
            .with("format", "semcache-snapshot-1")
            .with("next_id", state.next_id)
            .with("capacity_tokens", state.capacity_tokens)
            .with("tau_lsm", self.tau_lsm());
        fs::write(dir.join(META_FILE), meta.encode())?;
        let records: Vec<Record> = state
            .elements
            .iter()
            .map(|(id, s)| {
                let mut r = Record::new().with("id", id.0).with("last_access_us", s.last_access.as_micros());
                for (k, v) in s.element.to_record().fields() {
                    r.push(k, v);
                }
                r
            })
            .collect();
        fs::write(dir.join(ELEMENTS_FILE), kv::encode_all(&records))?;
        let file = BufWriter::new(fs::File::create(dir.join(INDEX_FILE))?);
        state.index.write_snapshot(file)?;
        Ok(())
    }

    /// Replaces the whole state with a snapshot written by
    /// [`Self::save_snapshot`]. Counters restart at zero.
    pub fn load_snapshot(&self, dir: &Path) -> Result<(), CacheError> {
        let meta = Record::decode(&fs::read_to_string(dir.join(META_FILE))?).map_err(ModelError::from)?;
        let next_id: u64 = meta.parse_field("next_id").map_err(ModelError::from)?;
        let capacity: u64 = meta.parse_field("capacity_tokens").map_err(ModelError::from)?;
        let tau: f64 = meta.parse_field("tau_lsm").map_err(ModelError::from)?;
        let file = BufReader::new(fs::File::open(dir.join(INDEX_FILE))?);
        let index = VectorIndex::read_snapshot(file, self.options.hnsw.clone())?;
        if index.dimension() != self.embedder.dimension() || index.seed() != self.embedder.seed() {
            return Err(CacheError::Snapshot(format!(
                "index built with dimension {} seed {}, embedder has dimension {} seed {}",
                index.dimension(),
                index.seed(),
                self.embedder.dimension(),
                self.embedder.seed()
            )));
        }
        let text = fs::read_to_string(dir.join(ELEMENTS_FILE))?;
        let mut elements = BTreeMap::new();
        let mut exact = HashMap::new();
        let mut usage = 0u64;
        for r in kv::decode_all(&text).map_err(ModelError::from)? {
            let id = ElementId(r.parse_field("id").map_err(ModelError::from)?);
            let last_access = Timestamp::from_micros(r.parse_field("last_access_us").map_err(ModelError::from)?);
            let element = SemanticElement::from_record(&r)?;
            if index.get(id) != Some(&element.embedding) {
                return Err(CacheError::Snapshot(format!("{id} embedding differs from index")));
            }
            usage += element.size_tokens;
            exact.insert(element.key.clone(), id);
            elements.insert(id, Slot { element, last_access });
        }
        if elements.len() != index.len() {
            return Err(CacheError::Snapshot("element and index counts differ".into()));
        }
        if usage > capacity {
            return Err(CacheError::Snapshot(format!("usage {usage} exceeds capacity {capacity}")));
        }
        let mut state = self.state.write();
        *state = State {
            capacity_tokens: capacity,
            elements,
            exact,
            index,
            usage_tokens: usage,
            next_id,
            recent: VecDeque::new(),
            stats: CacheStats::default(),
        };
        drop(state);
        self.set_tau_lsm(tau);
        Ok(())
    }
}
