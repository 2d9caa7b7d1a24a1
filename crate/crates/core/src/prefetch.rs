//! History-based predictive prefetching.
//!
//! A first-order Markov model over canonical query texts. A transition
//! `prev → q` is recorded when `q` is a confirmed cache hit and `prev` is the
//! request the same session issued immediately before it. After each request
//! the successors of the current query with probability `>= theta` that the
//! cache does not already answer (checked with a side-effect-free lookup) are
//! fetched at prefetch priority and admitted with frequency 0. An unused
//! prefetch therefore has eviction score 0 and is the first score-ranked
//! victim.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;

use crate::cache::{CacheError, LookupMode, SemanticCache};
use crate::clock::Timestamp;
use crate::model::SemanticKey;
use crate::remote::FetchRecord;
use crate::text::canonicalize;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MarkovModel {
    transitions: BTreeMap<String, BTreeMap<String, u64>>,
    totals: BTreeMap<String, u64>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("edge list line {line}: {reason}")]
pub struct EdgeListError {
    pub line: usize,
    pub reason: String,
}

impl MarkovModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, prev: &str, next: &str) {
        self.add(canonicalize(prev), canonicalize(next), 1);
    }

    fn add(&mut self, prev: String, next: String, count: u64) {
        *self.totals.entry(prev.clone()).or_default() += count;
        *self.transitions.entry(prev).or_default().entry(next).or_default() += count;
    }

    pub fn probability(&self, prev: &str, next: &str) -> f64 {
        let prev = canonicalize(prev);
        match (self.transitions.get(&prev), self.totals.get(&prev)) {
            (Some(succ), Some(&total)) => {
                succ.get(&canonicalize(next)).copied().unwrap_or(0) as f64 / total as f64
            }
            _ => 0.0,
        }
    }

    /// Successors by descending probability, ties by ascending text.
    pub fn predict(&self, query: &str) -> Vec<(String, f64)> {
        let query = canonicalize(query);
        let (Some(succ), Some(&total)) = (self.transitions.get(&query), self.totals.get(&query)) else {
            return Vec::new();
        };
        let mut out: Vec<(String, u64)> = succ.iter().map(|(k, &c)| (k.clone(), c)).collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out.into_iter().map(|(k, c)| (k, c as f64 / total as f64)).collect()
    }

    pub fn sources(&self) -> usize {
        self.totals.len()
    }

    /// One `source<TAB>target<TAB>count` line per edge, sorted.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (src, succ) in &self.transitions {
            for (dst, count) in succ {
                out.push_str(&format!("{src}\t{dst}\t{count}\n"));
            }
        }
        out
    }

    pub fn load(text: &str) -> Result<Self, EdgeListError> {
        let mut model = MarkovModel::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: &str| EdgeListError {
                line: i + 1,
                reason: reason.into(),
            };
            let mut parts = line.split('\t');
            let (Some(src), Some(dst), Some(count), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(err("expected three tab-separated fields"));
            };
            let count: u64 = count.parse().map_err(|_| err("count is not an integer"))?;
            if count == 0 {
                return Err(err("count is zero"));
            }
            model.add(canonicalize(src), canonicalize(dst), count);
        }
        Ok(model)
    }

    /// Checks that every total equals the sum of its outgoing counts.
    pub fn is_consistent(&self) -> bool {
        self.transitions.len() == self.totals.len()
            && self
                .transitions
                .iter()
                .all(|(k, succ)| self.totals.get(k) == Some(&succ.values().sum()))
    }
}

/// A reserved prefetch slot. Return it with [`Prefetcher::finish`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchTicket {
    pub key: SemanticKey,
    pub probability: f64,
}

#[derive(Debug)]
pub struct Prefetcher {
    model: Mutex<MarkovModel>,
    previous: Mutex<HashMap<String, String>>,
    theta: f64,
    max_in_flight: usize,
    in_flight: AtomicUsize,
}

impl Prefetcher {
    pub fn new(theta: f64, max_in_flight: usize) -> Self {
        Prefetcher {
            model: Mutex::new(MarkovModel::new()),
            previous: Mutex::new(HashMap::new()),
            theta,
            max_in_flight,
            in_flight: AtomicUsize::new(0),
        }
    }

    pub fn with_model(self, model: MarkovModel) -> Self {
        *self.model.lock() = model;
        self
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn model(&self) -> MarkovModel {
        self.model.lock().clone()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    /// Feeds one served request of `session` to the model.
    pub fn record(&self, session: &str, query: &str, hit: bool) {
        let prev = self.previous.lock().insert(session.to_string(), query.to_string());
        if let (true, Some(prev)) = (hit, prev) {
            self.model.lock().observe(&prev, query);
        }
    }

    /// Predictions for `current` worth fetching now. Each returned ticket
    /// holds one in-flight slot.
    pub fn plan(&self, current: &SemanticKey, cache: &SemanticCache, now: Timestamp, mode: LookupMode) -> Vec<PrefetchTicket> {
        let predictions = self.model.lock().predict(current.text());
        let mut tickets = Vec::new();
        for (text, p) in predictions {
            if p < self.theta {
                break;
            }
            let Ok(key) = SemanticKey::new(current.tool(), text) else {
                continue;
            };
            if cache.contains(&key, now, mode) {
                continue;
            }
            let reserved = self
                .in_flight
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < self.max_in_flight).then_some(n + 1))
                .is_ok();
            if !reserved {
                break;
            }
            tickets.push(PrefetchTicket { key, probability: p });
        }
        tickets
    }

    pub fn finish(&self, _ticket: PrefetchTicket) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Admits a completed prefetch with frequency 0. Not-found results are
/// dropped.
pub fn admit_prefetched(cache: &SemanticCache, record: &FetchRecord, now: Timestamp) -> Result<bool, CacheError> {
    if !record.found {
        return Ok(false);
    }
    let element = cache.element_for(
        record.query.clone(),
        &record.result,
        record.latency_ms,
        record.cost_usd,
        now,
        None,
    )?;
    cache.admit(element, now)?;
    Ok(true)
}

/// Synchronous prefetch round: plans, fetches each ticket once with `fetch`
/// and admits successes. Returns the keys that were initiated.
pub fn maybe_prefetch<F>(
    prefetcher: &Prefetcher,
    current: &SemanticKey,
    cache: &SemanticCache,
    now: Timestamp,
    mode: LookupMode,
    mut fetch: F,
) -> Vec<SemanticKey>
where
    F: FnMut(&SemanticKey) -> Option<FetchRecord>,
{
    let mut initiated = Vec::new();
    for ticket in prefetcher.plan(current, cache, now, mode) {
        if let Some(record) = fetch(&ticket.key) {
            if let Err(e) = admit_prefetched(cache, &record, now) {
                tracing::warn!(key = %ticket.key, error = %e, "prefetched result not admitted");
            }
        }
        initiated.push(ticket.key.clone());
        prefetcher.finish(ticket);
    }
    initiated
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::EngineOptions;
    use crate::embed::HashedBowEmbedder;
    use crate::judge::ReferenceJudge;
    use crate::model::CacheConfig;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn single_observation() {
        let mut m = MarkovModel::new();
        m.observe("A", "B");
        assert_eq!(m.probability("a", "b"), 1.0);
        assert_eq!(m.predict("A"), vec![("b".to_string(), 1.0)]);
    }

    #[test]
    fn split_observation() {
        let mut m = MarkovModel::new();
        m.observe("A", "B");
        m.observe("A", "C");
        assert_eq!(m.probability("A", "B"), 0.5);
    }

    #[test]
    fn folded_stream() {
        let stream = ["A", "B", "A", "B", "A"];
        let mut m = MarkovModel::new();
        for w in stream.windows(2) {
            m.observe(w[0], w[1]);
        }
        // Hand count: A→B twice, B→A twice.
        assert_eq!(m.probability("A", "B"), 1.0);
        assert_eq!(m.probability("B", "A"), 1.0);
    }

    #[test]
    fn prediction_order_and_unknown() {
        let mut m = MarkovModel::new();
        assert!(m.predict("nothing").is_empty());
        m.observe("q", "y");
        m.observe("q", "x");
        m.observe("q", "y");
        let p = m.predict("q");
        assert_eq!(p[0].0, "y");
        assert!((p[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1].1 - 1.0 / 3.0).abs() < 1e-12);
        m.observe("q", "x");
        assert_eq!(m.predict("q")[0].0, "x"); // 2:2 tie, ascending text
    }

    #[test]
    fn canonical_keys() {
        let mut m = MarkovModel::new();
        m.observe("  Who  Painted\tIt ", "NEXT one");
        assert_eq!(m.probability("who painted it", "next one"), 1.0);
    }

    #[test]
    fn edge_list_round_trip() {
        let mut m = MarkovModel::new();
        m.observe("a b", "c");
        m.observe("a b", "c");
        m.observe("c", "a b");
        let text = m.dump();
        assert_eq!(text, "a b\tc\t2\nc\ta b\t1\n");
        assert_eq!(MarkovModel::load(&text).unwrap(), m);
        assert!(MarkovModel::load("a\tb").is_err());
        assert!(MarkovModel::load("a\tb\t0").is_err());
    }

    fn cache() -> SemanticCache {
        SemanticCache::with_options(
            CacheConfig {
                capacity_tokens: 1000,
                tau_sim: 0.7,
                ..CacheConfig::default()
            },
            Arc::new(HashedBowEmbedder::default()),
            Arc::new(ReferenceJudge),
            EngineOptions::default(),
        )
        .unwrap()
    }

    fn record(text: &str) -> FetchRecord {
        FetchRecord {
            query: SemanticKey::search(text).unwrap(),
            result: format!("answer about {text}"),
            latency_ms: 400.0,
            cost_usd: 0.005,
            retries: 0,
            throttled: false,
            found: true,
        }
    }

    fn trained(p_b: u64, p_c: u64) -> Prefetcher {
        let mut m = MarkovModel::new();
        for _ in 0..p_b {
            m.observe("volcano eruption", "violin concerto");
        }
        for _ in 0..p_c {
            m.observe("volcano eruption", "glacier retreat");
        }
        Prefetcher::new(0.5, DEFAULT_MAX_IN_FLIGHT).with_model(m)
    }

    #[test]
    fn below_theta_initiates_nothing() {
        let p = trained(2, 3); // 0.4 / 0.6
        let c = cache();
        let cur = SemanticKey::search("volcano eruption").unwrap();
        let got = maybe_prefetch(&p, &cur, &c, Timestamp::ZERO, LookupMode::Full, |k| Some(record(k.text())));
        assert_eq!(got, vec![SemanticKey::search("glacier retreat").unwrap()]);
    }

    #[test]
    fn cached_target_initiates_nothing() {
        let p = trained(9, 1);
        let c = cache();
        let el = c
            .element_for(SemanticKey::search("violin concerto").unwrap(), "v", 1.0, 0.0, Timestamp::ZERO, None)
            .unwrap();
        c.admit(el, Timestamp::ZERO).unwrap();
        let cur = SemanticKey::search("volcano eruption").unwrap();
        let got = maybe_prefetch(&p, &cur, &c, Timestamp::ZERO, LookupMode::Full, |_| panic!("no fetch expected"));
        assert!(got.is_empty());
        assert_eq!(p.in_flight(), 0);
    }

    #[test]
    fn successful_prefetch_admits_with_zero_frequency() {
        let p = trained(9, 1);
        let c = cache();
        let cur = SemanticKey::search("volcano eruption").unwrap();
        let got = maybe_prefetch(&p, &cur, &c, Timestamp::ZERO, LookupMode::Full, |k| Some(record(k.text())));
        assert_eq!(got.len(), 1);
        let (_, el) = c.elements().pop().unwrap();
        assert_eq!(el.key.text(), "violin concerto");
        assert_eq!(el.frequency, 0);
        assert_eq!(p.in_flight(), 0);
    }

    #[test]
    fn failed_fetch_admits_nothing() {
        let p = trained(9, 1);
        let c = cache();
        let cur = SemanticKey::search("volcano eruption").unwrap();
        let mut calls = 0;
        maybe_prefetch(&p, &cur, &c, Timestamp::ZERO, LookupMode::Full, |_| {
            calls += 1;
            None
        });
        assert_eq!(calls, 1);
        assert!(c.is_empty());
    }

    #[test]
    fn in_flight_cap() {
        let mut m = MarkovModel::new();
        m.observe("a", "b");
        let p = Prefetcher::new(0.5, 1).with_model(m);
        let c = cache();
        let cur = SemanticKey::search("a").unwrap();
        let t1 = p.plan(&cur, &c, Timestamp::ZERO, LookupMode::Full);
        assert_eq!(t1.len(), 1);
        assert!(p.plan(&cur, &c, Timestamp::ZERO, LookupMode::Full).is_empty());
        p.finish(t1.into_iter().next().unwrap());
        assert_eq!(p.plan(&cur, &c, Timestamp::ZERO, LookupMode::Full).len(), 1);
    }

    #[test]
    fn session_stream_learns_only_hit_targets() {
        let p = Prefetcher::new(0.5, 4);
        p.record("s", "a", false);
        p.record("s", "b", false);
        assert_eq!(p.model().sources(), 0);
        p.record("s", "a", true);
        p.record("other", "z", true);
        assert_eq!(p.model().probability("b", "a"), 1.0);
        assert_eq!(p.model().sources(), 1);
    }

    #[test]
    fn unused_prefetch_is_first_victim() {
        let c = cache();
        let now = Timestamp::ZERO;
        // A popular resident element with one confirmed hit.
        let el = c
            .element_for(SemanticKey::search("popular topic").unwrap(), "a b c", 400.0, 0.005, now, None)
            .unwrap();
        c.admit(el, now).unwrap();
        c.lookup(&SemanticKey::search("popular topic").unwrap(), now, LookupMode::Full, false);
        admit_prefetched(&c, &record("speculative topic"), now.plus_secs(1.0)).unwrap();
        let victims = c.evict_to(0, now.plus_secs(2.0)).evicted;
        assert_eq!(victims.len(), 2);
        // The prefetched element was admitted second, so its id is larger;
        // it must nonetheless go first.
        assert!(victims[0] > victims[1]);
    }

    proptest! {
        #[test]
        fn totals_consistent_and_probabilities_sum_to_one(pairs in prop::collection::vec((0u8..5, 0u8..5), 0..60)) {
            let mut m = MarkovModel::new();
            for (a, b) in &pairs {
                m.observe(&format!("q{a}"), &format!("q{b}"));
            }
            prop_assert!(m.is_consistent());
            for a in 0..5u8 {
                let p = m.predict(&format!("q{a}"));
                if !p.is_empty() {
                    let s: f64 = p.iter().map(|x| x.1).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                    prop_assert!(p.windows(2).all(|w| w[0].1 >= w[1].1));
                }
            }
            prop_assert_eq!(MarkovModel::load(&m.dump()).unwrap(), m);
        }
    }
}
