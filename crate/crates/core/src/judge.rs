//! Fine-grained validation of coarse candidates.
//!
//! A judge scores how well a cached result answers a new query (`s_lsm` in
//! `[0, 1]`) and rates how time-invariant a query/result pair is (staticity,
//! `1..=10`). A candidate is a hit iff `s_lsm >= tau_lsm`.
//!
//! The reference judge is lexical. With `Q` and `C` the content words of the
//! new and cached query, and `R` the tokens of the cached result:
//!
//! ```text
//! o = |Q ∩ C| / |Q ∪ C|          query overlap (Jaccard)
//! c = |Q ∩ R| / |Q|              containment of the query in the result
//! s = o · (c + (1 − c) · o)
//! ```
//!
//! `s` lies in `[o², o]`, equals 1 for token-identical queries, is 0 for
//! disjoint ones, and for a fixed result is nondecreasing in `o`. Containment
//! only matters while `o < 1`, where a result that actually mentions the
//! query's topic earns the full `o`.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use thiserror::Error;

use crate::kv;
use crate::model::{SemanticElement, DEFAULT_STATICITY};
use crate::text;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge backend failed: {0}")]
    Backend(String),
    #[error("judge unavailable: {0}")]
    Transport(#[from] std::io::Error),
    #[error("judge protocol error: {0}")]
    Protocol(String),
}

impl JudgeError {
    /// Every judge failure is safe to retry; callers that do not retry treat
    /// the candidate as a miss.
    pub fn is_retriable(&self) -> bool {
        true
    }
}

pub trait Judge: Send + Sync {
    fn score(&self, query: &str, cached_query: &str, cached_result: &str) -> Result<f64, JudgeError>;
    fn staticity(&self, query: &str, result: &str) -> Result<u8, JudgeError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JudgeVerdict {
    pub s_lsm: f64,
    pub hit: bool,
}

impl JudgeVerdict {
    pub fn new(s_lsm: f64, tau_lsm: f64) -> Self {
        JudgeVerdict {
            s_lsm,
            hit: s_lsm >= tau_lsm,
        }
    }
}

/// Scores `candidate` against `query`. Never touches cache state.
pub fn validate(
    judge: &dyn Judge,
    query: &str,
    candidate: &SemanticElement,
    tau_lsm: f64,
) -> Result<JudgeVerdict, JudgeError> {
    let s = judge.score(query, candidate.key.text(), &candidate.value)?;
    Ok(JudgeVerdict::new(s.clamp(0.0, 1.0), tau_lsm))
}

pub fn reference_score(query: &str, cached_query: &str, cached_result: &str) -> f64 {
    let q = text::content_words(query);
    let cq = text::content_words(cached_query);
    if q.is_empty() || cq.is_empty() {
        return 0.0;
    }
    let inter = q.intersection(&cq).count() as f64;
    let union = q.union(&cq).count() as f64;
    let o = inter / union;
    let result: BTreeSet<String> = text::tokenize(cached_result).into_iter().collect();
    let c = q.iter().filter(|w| result.contains(*w)).count() as f64 / q.len() as f64;
    o * (c + (1.0 - c) * o)
}

/// Cues that mark stable, fact-like requests.
const FACT_PHRASES: &[&str] = &["when was", "where is", "who invented", "who painted", "who wrote"];
const FACT_WORDS: &[&str] = &[
    "author", "born", "built", "capital", "definition", "discovered", "founded", "height",
    "historical", "history", "invented", "located", "location", "meaning", "museum", "painted",
    "source", "tall", "wrote",
];
/// Cues that mark ephemeral requests.
const TEMPORAL_PHRASES: &[&str] = &["right now", "this week"];
const TEMPORAL_WORDS: &[&str] = &[
    "breaking", "current", "currently", "exchange", "forecast", "latest", "live", "news", "now",
    "price", "prices", "score", "scores", "stock", "stocks", "today", "tomorrow", "tonight",
    "trending", "weather", "yesterday",
];
const CUE_WEIGHT: i32 = 3;

/// Lexicon staticity: start at the neutral default, add [`CUE_WEIGHT`] per
/// distinct fact cue and subtract it per distinct temporal cue found in the
/// query or the result, then clamp to `1..=10`.
pub fn staticity_score(query: &str, result: &str) -> u8 {
    let tokens: Vec<String> = text::tokenize(query)
        .into_iter()
        .chain(text::tokenize(result))
        .collect();
    let joined = format!(" {} ", tokens.join(" "));
    let words: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
    let count = |phrases: &[&str], list: &[&str]| {
        let p = phrases
            .iter()
            .filter(|p| joined.contains(&format!(" {p} ")))
            .count();
        let w = list.iter().filter(|w| words.contains(*w)).count();
        (p + w) as i32
    };
    let fact = count(FACT_PHRASES, FACT_WORDS);
    let temporal = count(TEMPORAL_PHRASES, TEMPORAL_WORDS);
    (i32::from(DEFAULT_STATICITY) + CUE_WEIGHT * (fact - temporal)).clamp(1, 10) as u8
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceJudge;

impl Judge for ReferenceJudge {
    fn score(&self, query: &str, cached_query: &str, cached_result: &str) -> Result<f64, JudgeError> {
        Ok(reference_score(query, cached_query, cached_result))
    }

    fn staticity(&self, query: &str, result: &str) -> Result<u8, JudgeError> {
        Ok(staticity_score(query, result))
    }
}

/// Client for a judge server.
///
/// One exchange per connection. Request line: `score`, query, cached query
/// and cached result, tab-separated; or `staticity`, query and result. Fields
/// are escaped as in [`crate::kv`]. Response line: the number.
#[derive(Debug, Clone)]
pub struct RemoteJudge {
    addr: SocketAddr,
    timeout: Duration,
}

impl RemoteJudge {
    pub fn new(addr: SocketAddr, timeout: Duration) -> Self {
        RemoteJudge { addr, timeout }
    }

    fn exchange(&self, fields: &[&str]) -> Result<String, JudgeError> {
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let line: Vec<String> = fields.iter().map(|f| kv::escape(f)).collect();
        stream.write_all(line.join("\t").as_bytes())?;
        stream.write_all(b"\n")?;
        stream.flush()?;
        let mut response = String::new();
        BufReader::new(stream).read_line(&mut response)?;
        if response.trim().is_empty() {
            return Err(JudgeError::Protocol("empty response".into()));
        }
        Ok(response.trim().to_string())
    }
}

impl Judge for RemoteJudge {
    fn score(&self, query: &str, cached_query: &str, cached_result: &str) -> Result<f64, JudgeError> {
        let raw = self.exchange(&["score", query, cached_query, cached_result])?;
        let s: f64 = raw
            .parse()
            .map_err(|e| JudgeError::Protocol(format!("bad score {raw:?}: {e}")))?;
        if !(0.0..=1.0).contains(&s) {
            return Err(JudgeError::Protocol(format!("score {s} outside [0, 1]")));
        }
        Ok(s)
    }

    fn staticity(&self, query: &str, result: &str) -> Result<u8, JudgeError> {
        let raw = self.exchange(&["staticity", query, result])?;
        let s: u8 = raw
            .parse()
            .map_err(|e| JudgeError::Protocol(format!("bad staticity {raw:?}: {e}")))?;
        if !(1..=10).contains(&s) {
            return Err(JudgeError::Protocol(format!("staticity {s} outside 1..=10")));
        }
        Ok(s)
    }
}
