//! The Semantic Element and the value types shared by every other module.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::kv::{KvError, Record};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("semantic key text is empty")]
    EmptyKeyText,
    #[error("tool identifier is empty")]
    EmptyTool,
    #[error("value is empty")]
    EmptyValue,
    #[error("staticity {0} outside 1..=10")]
    StaticityOutOfRange(u8),
    #[error("ttl must be positive, got {0}")]
    NonPositiveTtl(f64),
    #[error("{field} must be non-negative and finite, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("embedding is not unit length (norm {0})")]
    NotNormalized(f64),
    #[error("embedding has zero dimension")]
    EmptyEmbedding,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Record(#[from] KvError),
}

/// Staticity assigned when the scorer has no opinion.
pub const DEFAULT_STATICITY: u8 = 5;

/// Norm tolerance for stored embeddings.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// The agent's query or tool action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticKey {
    tool: String,
    text: String,
}

impl SemanticKey {
    pub fn new(tool: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let tool = tool.into();
        let text = text.into();
        if tool.trim().is_empty() {
            return Err(ModelError::EmptyTool);
        }
        if text.trim().is_empty() {
            return Err(ModelError::EmptyKeyText);
        }
        Ok(SemanticKey { tool, text })
    }

    pub fn search(text: impl Into<String>) -> Result<Self, ModelError> {
        Self::new("search", text)
    }

    pub fn tool(&self) -> &str {
        &self.tool
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl fmt::Display for SemanticKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.tool, self.text)
    }
}

/// Unit-length embedding stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    components: Vec<f32>,
}

impl EmbeddingVector {
    /// Scales `raw` to unit length. Normalization is done in double precision
    /// so the stored single-precision vector stays within [`NORM_TOLERANCE`].
    pub fn normalized(raw: &[f64]) -> Result<Self, ModelError> {
        if raw.is_empty() {
            return Err(ModelError::EmptyEmbedding);
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(ModelError::NotNormalized(norm));
        }
        Ok(EmbeddingVector {
            components: raw.iter().map(|x| (x / norm) as f32).collect(),
        })
    }

    /// Wraps components that are already unit length.
    pub fn from_unit(components: Vec<f32>) -> Result<Self, ModelError> {
        if components.is_empty() {
            return Err(ModelError::EmptyEmbedding);
        }
        let v = EmbeddingVector { components };
        let norm = v.norm();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(ModelError::NotNormalized(norm));
        }
        Ok(v)
    }

    pub fn dimension(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[f32] {
        &self.components
    }

    pub fn norm(&self) -> f64 {
        self.components
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    /// Cosine similarity, which for unit vectors is the dot product. Accumulated
    /// in double precision.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        debug_assert_eq!(self.dimension(), other.dimension());
        self.components
            .iter()
            .zip(&other.components)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    }
}

/// Opaque identifier of a cached element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ElementId(pub u64);

impl fmt::Display for ElementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "se-{}", self.0)
    }
}

/// Number of whitespace-separated tokens in `value`.
pub fn token_count(value: &str) -> Result<u64, ModelError> {
    match value.split_whitespace().count() {
        0 => Err(ModelError::EmptyValue),
        n => Ok(n as u64),
    }
}

/// Cache unit: a key, its retrieved value and the metadata eviction needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticElement {
    pub key: SemanticKey,
    pub value: String,
    pub embedding: EmbeddingVector,
    pub staticity: u8,
    pub frequency: u64,
    pub retrieval_latency_ms: f64,
    pub retrieval_cost_usd: f64,
    pub size_tokens: u64,
    pub created_at: Timestamp,
    pub expiration_time: Timestamp,
    pub value_score: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn make_element(
    key: SemanticKey,
    value: impl Into<String>,
    embedding: EmbeddingVector,
    staticity: u8,
    latency_ms: f64,
    cost_usd: f64,
    now: Timestamp,
    ttl_seconds: f64,
) -> Result<SemanticElement, ModelError> {
    let value = value.into();
    let size_tokens = token_count(&value)?;
    if !(1..=10).contains(&staticity) {
        return Err(ModelError::StaticityOutOfRange(staticity));
    }
    if !(ttl_seconds > 0.0) || !ttl_seconds.is_finite() {
        return Err(ModelError::NonPositiveTtl(ttl_seconds));
    }
    check_non_negative("latency_ms", latency_ms)?;
    check_non_negative("cost_usd", cost_usd)?;
    let norm = embedding.norm();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(ModelError::NotNormalized(norm));
    }
    Ok(SemanticElement {
        key,
        value,
        embedding,
        staticity,
        frequency: 0,
        retrieval_latency_ms: latency_ms,
        retrieval_cost_usd: cost_usd,
        size_tokens,
        created_at: now,
        expiration_time: now.plus_secs(ttl_seconds),
        // frequency 0 zeroes the eviction score
        value_score: 0.0,
    })
}

fn check_non_negative(field: &'static str, value: f64) -> Result<(), ModelError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::Negative { field, value })
    }
}

// Canonical record field order.
const F_TOOL: &str = "key.tool";
const F_TEXT: &str = "key.text";
const F_VALUE: &str = "value";
const F_DIM: &str = "embedding.dimension";
const F_EMB: &str = "embedding";
const F_STAT: &str = "staticity";
const F_FREQ: &str = "frequency";
const F_LAT: &str = "retrieval_latency_ms";
const F_COST: &str = "retrieval_cost_usd";
const F_SIZE: &str = "size_tokens";
const F_CREATED: &str = "created_at_us";
const F_EXPIRES: &str = "expiration_time_us";
const F_SCORE: &str = "value_score";

impl SemanticElement {
    pub fn ttl_remaining_secs(&self, now: Timestamp) -> f64 {
        self.expiration_time.secs_since(now)
    }

    pub fn is_expired(&self, now: Timestamp) -> bool {
        self.expiration_time <= now
    }

    /// Flat record, one field per line in the order: key.tool, key.text,
    /// value, embedding.dimension, embedding, staticity, frequency,
    /// retrieval_latency_ms, retrieval_cost_usd, size_tokens, created_at_us,
    /// expiration_time_us, value_score. Floats use shortest round-trip
    /// formatting, so decoding reproduces every field bit for bit.
    pub fn to_record(&self) -> Record {
        let emb = self
            .embedding
            .components()
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        Record::new()
            .with(F_TOOL, self.key.tool())
            .with(F_TEXT, self.key.text())
            .with(F_VALUE, &self.value)
            .with(F_DIM, self.embedding.dimension())
            .with(F_EMB, emb)
            .with(F_STAT, self.staticity)
            .with(F_FREQ, self.frequency)
            .with(F_LAT, self.retrieval_latency_ms)
            .with(F_COST, self.retrieval_cost_usd)
            .with(F_SIZE, self.size_tokens)
            .with(F_CREATED, self.created_at.as_micros())
            .with(F_EXPIRES, self.expiration_time.as_micros())
            .with(F_SCORE, self.value_score)
    }

    pub fn from_record(record: &Record) -> Result<Self, ModelError> {
        let key = SemanticKey::new(record.require(F_TOOL)?, record.require(F_TEXT)?)?;
        let dim: usize = record.parse_field(F_DIM)?;
        let components = record
            .require(F_EMB)?
            .split_whitespace()
            .map(str::parse::<f32>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| KvError::BadField {
                field: F_EMB.into(),
                reason: e.to_string(),
            })?;
        if components.len() != dim {
            return Err(KvError::BadField {
                field: F_EMB.into(),
                reason: format!("expected {dim} components, found {}", components.len()),
            }
            .into());
        }
        let element = SemanticElement {
            key,
            value: record.require(F_VALUE)?.to_string(),
            embedding: EmbeddingVector::from_unit(components)?,
            staticity: record.parse_field(F_STAT)?,
            frequency: record.parse_field(F_FREQ)?,
            retrieval_latency_ms: record.parse_field(F_LAT)?,
            retrieval_cost_usd: record.parse_field(F_COST)?,
            size_tokens: record.parse_field(F_SIZE)?,
            created_at: Timestamp::from_micros(record.parse_field(F_CREATED)?),
            expiration_time: Timestamp::from_micros(record.parse_field(F_EXPIRES)?),
            value_score: record.parse_field(F_SCORE)?,
        };
        if !(1..=10).contains(&element.staticity) {
            return Err(ModelError::StaticityOutOfRange(element.staticity));
        }
        if element.size_tokens == 0 {
            return Err(ModelError::EmptyValue);
        }
        Ok(element)
    }
}

/// Tunables of the cache engine and its maintenance tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    /// Budget in `size_tokens` units.
    pub capacity_tokens: u64,
    /// Coarse similarity gate.
    pub tau_sim: f64,
    /// Judge confidence gate.
    pub tau_lsm: f64,
    pub ttl_seconds: f64,
    /// Candidates handed to the judge per lookup.
    pub candidate_k: usize,
    pub prefetch_theta: f64,
    /// Precision target for threshold recalibration.
    pub p_target: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity_tokens: 1_000_000,
            tau_sim: 0.9,
            tau_lsm: 0.9,
            ttl_seconds: 24.0 * 3600.0,
            candidate_k: 5,
            prefetch_theta: 0.5,
            p_target: 0.99,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ModelError::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if self.capacity_tokens == 0 {
            return Err(ModelError::Config("capacity_tokens must be positive".into()));
        }
        unit("tau_sim", self.tau_sim)?;
        unit("tau_lsm", self.tau_lsm)?;
        unit("prefetch_theta", self.prefetch_theta)?;
        if !(self.p_target > 0.0 && self.p_target <= 1.0) {
            return Err(ModelError::Config(format!(
                "p_target = {} outside (0, 1]",
                self.p_target
            )));
        }
        if !(self.ttl_seconds > 0.0) {
            return Err(ModelError::NonPositiveTtl(self.ttl_seconds));
        }
        if self.candidate_k == 0 {
            return Err(ModelError::Config("candidate_k must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(dim: usize) -> EmbeddingVector {
        let mut raw = vec![0.0; dim];
        raw[0] = 1.0;
        EmbeddingVector::normalized(&raw).unwrap()
    }

    fn mona_lisa(now: Timestamp) -> SemanticElement {
        make_element(
            SemanticKey::search("who painted the Mona Lisa?").unwrap(),
            "Leonardo da Vinci painted the Mona Lisa between 1503 and 1519",
            unit(8),
            10,
            400.0,
            0.005,
            now,
            60.0,
        )
        .unwrap()
    }

    #[test]
    fn fresh_element_has_zero_frequency() {
        let now = Timestamp::from_secs_f64(5.0);
        let se = mona_lisa(now);
        assert_eq!(se.frequency, 0);
        assert_eq!(se.size_tokens, 11);
        assert_eq!(se.expiration_time, now.plus_secs(60.0));
        assert_eq!(se.value_score, 0.0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let key = SemanticKey::search("q").unwrap();
        let mk = |value: &str, stat: u8, ttl: f64| {
            make_element(key.clone(), value, unit(4), stat, 1.0, 0.0, Timestamp::ZERO, ttl)
        };
        assert_eq!(mk("v", 5, 0.0), Err(ModelError::NonPositiveTtl(0.0)));
        assert_eq!(mk("  ", 5, 1.0), Err(ModelError::EmptyValue));
        assert_eq!(mk("v", 0, 1.0), Err(ModelError::StaticityOutOfRange(0)));
        assert_eq!(mk("v", 11, 1.0), Err(ModelError::StaticityOutOfRange(11)));
        assert_eq!(SemanticKey::search("   "), Err(ModelError::EmptyKeyText));
        assert_eq!(SemanticKey::new("", "x"), Err(ModelError::EmptyTool));
    }

    #[test]
    fn token_count_is_whitespace_split() {
        assert_eq!(token_count("a b c").unwrap(), 3);
        assert_eq!(token_count("Leonardo").unwrap(), 1);
        assert_eq!(token_count("one two three four five six seven").unwrap(), 7);
        assert!(token_count("").is_err());
    }

    #[test]
    fn token_count_matches_independent_splitter_on_long_document() {
        let words: Vec<String> = (0..1000).map(|i| format!("w{i}")).collect();
        let doc = words.join(if words.len() % 2 == 0 { " " } else { "\t" });
        // Independent oracle: count transitions from whitespace to non-whitespace.
        let mut count = 0;
        let mut prev_ws = true;
        for ch in doc.chars() {
            let ws = ch.is_whitespace();
            if prev_ws && !ws {
                count += 1;
            }
            prev_ws = ws;
        }
        assert_eq!(count, 1000);
        assert_eq!(token_count(&doc).unwrap(), 1000);
    }

    #[test]
    fn normalized_embedding_is_unit_within_tolerance() {
        let raw: Vec<f64> = (0..256).map(|i| ((i * 7919) % 101) as f64 - 50.0).collect();
        let v = EmbeddingVector::normalized(&raw).unwrap();
        assert!((v.norm() - 1.0).abs() <= NORM_TOLERANCE);
        assert!(EmbeddingVector::normalized(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CacheConfig::default().validate().is_ok());
        let bad = CacheConfig {
            tau_sim: 1.5,
            ..CacheConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = CacheConfig {
            p_target: 0.0,
            ..CacheConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn arb_element() -> impl Strategy<Value = SemanticElement> {
        (
            "[a-z]{1,8}",
            "\\PC{1,40}",
            "[a-zA-Z0-9 \\n\\t\\\\=]{0,40}",
            prop::collection::vec(-1.0f64..1.0, 4..16),
            1u8..=10,
            0u64..1000,
            0.0f64..5000.0,
            0.0f64..1.0,
            -1_000_000i64..1_000_000,
            1.0f64..1e6,
        )
            .prop_filter_map(
                "non-degenerate",
                |(tool, text, value, raw, stat, freq, lat, cost, created, ttl)| {
                    let key = SemanticKey::new(tool, text).ok()?;
                    let emb = EmbeddingVector::normalized(&raw).ok()?;
                    let value = format!("v {value}");
                    let mut se = make_element(
                        key,
                        value,
                        emb,
                        stat,
                        lat,
                        cost,
                        Timestamp::from_micros(created),
                        ttl,
                    )
                    .ok()?;
                    se.frequency = freq;
                    se.value_score = lat * cost / 3.0;
                    Some(se)
                },
            )
    }

    proptest! {
        #[test]
        fn record_round_trip(se in arb_element()) {
            let text = se.to_record().encode();
            let decoded = SemanticElement::from_record(&Record::decode(&text).unwrap()).unwrap();
            prop_assert_eq!(decoded, se);
        }
    }
}
