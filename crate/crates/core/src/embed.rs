//! Embedding backends.
//!
//! [`HashedBowEmbedder`] is the deterministic reference: lowercase, strip
//! punctuation, hash every token with a seed into one of `dimension` buckets,
//! accumulate and L2-normalize. Function words (see [`crate::text`]) add
//! [`FUNCTION_WORD_WEIGHT`] instead of 1 so that rephrasings which only change
//! the request framing stay close. [`RemoteEmbedder`] talks to an embedding
//! server over a one-line request/response TCP protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use thiserror::Error;

use crate::model::{EmbeddingVector, ModelError};
use crate::text;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text has no tokens after stripping punctuation")]
    NoTokens,
    #[error("embedder dimension must be at least 8, got {0}")]
    DimensionTooSmall(usize),
    #[error("remote embedder returned dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("remote embedder protocol error: {0}")]
    Protocol(String),
    /// Transport-level failure; the caller may retry.
    #[error("remote embedder unavailable: {0}")]
    Transport(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Transport(_))
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// Identifies the vector space; vectors from different seeds are never
    /// mixed in one index.
    fn seed(&self) -> u64 {
        0
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;
}

pub const DEFAULT_DIMENSION: usize = 256;

/// Contribution of a function word relative to a content word.
pub const FUNCTION_WORD_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashedBowEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Result<Self, EmbedError> {
        if dimension < 8 {
            return Err(EmbedError::DimensionTooSmall(dimension));
        }
        Ok(HashedBowEmbedder { dimension, seed })
    }

    pub fn bucket(&self, token: &str) -> usize {
        (seeded_fnv1a(self.seed, token.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder {
            dimension: DEFAULT_DIMENSION,
            seed: 1,
        }
    }
}

/// FNV-1a over the seed bytes followed by the data, finished with a
/// splitmix64 avalanche so that neighbouring seeds give unrelated buckets.
fn seeded_fnv1a(seed: u64, data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in seed.to_le_bytes().iter().chain(data) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Free-function form of the reference embedder.
pub fn reference_embed(text: &str, dimension: usize, seed: u64) -> Result<EmbeddingVector, EmbedError> {
    HashedBowEmbedder::new(dimension, seed)?.embed(text)
}

impl Embedder for HashedBowEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let tokens = text::tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::NoTokens);
        }
        let mut acc = vec![0.0f64; self.dimension];
        for token in &tokens {
            let weight = if text::is_function_word(token) {
                FUNCTION_WORD_WEIGHT
            } else {
                1.0
            };
            acc[self.bucket(token)] += weight;
        }
        Ok(EmbeddingVector::normalized(&acc)?)
    }
}

/// Client for an embedding server.
///
/// Protocol, one exchange per connection: the client sends the text on a
/// single line (newlines replaced by spaces); the server answers with one line
/// `<dimension> <c1> <c2> ...`. The returned vector is re-normalized.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    addr: SocketAddr,
    dimension: usize,
    seed: u64,
    timeout: Duration,
}

impl RemoteEmbedder {
    pub fn new(addr: SocketAddr, dimension: usize, seed: u64, timeout: Duration) -> Self {
        RemoteEmbedder {
            addr,
            dimension,
            seed,
            timeout,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let line = text.replace(['\n', '\r'], " ");
        stream.write_all(line.as_bytes())?;
        stream.write_all(b"\n")?;
        stream.flush()?;
        let mut response = String::new();
        BufReader::new(stream).read_line(&mut response)?;
        let mut parts = response.split_whitespace();
        let dim: usize = parts
            .next()
            .ok_or_else(|| EmbedError::Protocol("empty response".into()))?
            .parse()
            .map_err(|e| EmbedError::Protocol(format!("bad dimension: {e}")))?;
        if dim != self.dimension {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dimension,
                got: dim,
            });
        }
        let raw = parts
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EmbedError::Protocol(format!("bad component: {e}")))?;
        if raw.len() != dim {
            return Err(EmbedError::Protocol(format!(
                "announced {dim} components, received {}",
                raw.len()
            )));
        }
        Ok(EmbeddingVector::normalized(&raw)?)
    }
}
